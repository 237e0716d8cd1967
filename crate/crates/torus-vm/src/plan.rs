//! Reference plans for the return method: a strip-case plan built from
//! harmonic kicks between magnetic waits, and a ball-union plan built from
//! Maxwell steering around a constant electric field.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{rk4_step, FieldProvider, ForceSpec, LightSpeed, PhaseState, SampledFields};
use crate::control::bump;
use crate::error::{Error, Result};
use crate::geometry::{segment_lattice_entry, Ball, ControlSet};
use crate::maxwell::{evolve_spectral, poisson_spectral, SpectralSources, SpectralState};
use crate::reference::{
    charge_correction, check_accel_field, make_bumps, AccelReport, BumpProfile, CorrectionReport, HarmonicMode,
    StripGeometry, Wave,
};
use crate::spectral::{
    divergence, gradient, to_real, to_real_vector, to_spectral, GridSpec, ScalarField, SpectralScalar, SpectralVector,
    VectorField,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentMode {
    Idle,
    MaxwellSteerUp,
    HoldConstantE,
    MaxwellSteerDown,
    PoissonAccelerate,
    BendWait,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Segment {
    pub start: f64,
    pub duration: f64,
    pub mode: SegmentMode,
}

impl Segment {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Normalised `C∞` pulse on `(0, 1)` and its derivative.
pub fn pulse(u: f64) -> (f64, f64) {
    // ∫₀¹ bump(2u − 1) du
    const MASS: f64 = 0.603_450_161_218_938_2;
    if !(u > 0.0 && u < 1.0) {
        return (0.0, 0.0);
    }
    let s = 2.0 * u - 1.0;
    let (b, db) = bump(s.abs());
    (b / MASS, 2.0 * db * s.signum() / MASS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KickSpec {
    pub wave: Wave,
    #[serde(default)]
    pub growing: bool,
    /// Time integral of the potential amplitude.
    pub impulse: f64,
    pub duration: f64,
    /// Magnetic wait after the kick.
    pub wait: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseGrid {
    pub positions: usize,
    pub directions: usize,
    pub speeds: usize,
}

impl PhaseGrid {
    /// Samples of `T² × B(0, r)`, the zero velocity included once per position.
    pub fn samples(&self, r: f64) -> Vec<PhaseState> {
        let mut out = Vec::new();
        for a in 0..self.positions {
            for b in 0..self.positions {
                let x = [(a as f64 + 0.5) / self.positions as f64, (b as f64 + 0.5) / self.positions as f64];
                out.push(PhaseState::new(x, [0.0, 0.0]));
                for k in 1..self.speeds {
                    let s = r * k as f64 / (self.speeds - 1) as f64;
                    for j in 0..self.directions {
                        // offset so no direction is an axis
                        let th = 2.0 * std::f64::consts::PI * (j as f64 + 0.37) / self.directions as f64;
                        out.push(PhaseState::new(x, [s * th.cos(), s * th.sin()]));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StripPlanConfig {
    pub direction: [i64; 2],
    pub offset: [f64; 2],
    pub half_width: f64,
    /// Half-width of the charged band.
    pub band: f64,
    /// Half-width of the region where the correction cutoff vanishes.
    pub inner: f64,
    /// Constant external magnetic field.
    pub magnetic: f64,
    pub c: f64,
    /// Radius of the initial velocity ball.
    pub speed_cap: f64,
    pub target_center: [f64; 2],
    pub target_radius: f64,
    pub lead_wait: f64,
    pub kicks: Vec<KickSpec>,
    pub grid_n: usize,
    pub k_max: usize,
    /// Source samples per kick for the Maxwell evolution.
    pub kick_samples: usize,
    /// RK4 steps per kick for the closed-form census.
    pub kick_steps: usize,
    pub census: PhaseGrid,
    /// Census of the Maxwell-driven characteristics.
    pub maxwell_census: PhaseGrid,
    pub sweep_particles: usize,
    pub sweep_factors: Vec<f64>,
    pub quad_n: usize,
}

impl Default for StripPlanConfig {
    fn default() -> Self {
        let kick = |wave, growing| KickSpec { wave, growing, impulse: 544.0, duration: 1e-4, wait: 4.0 };
        Self {
            direction: [1, 0],
            offset: [0.0, 0.5],
            half_width: 0.4,
            band: 0.15,
            inner: 0.2,
            magnetic: 1.0,
            c: 4e6,
            speed_cap: 4.0,
            target_center: [0.5, 0.5],
            target_radius: 0.1,
            lead_wait: 4.0,
            kicks: vec![kick(Wave::Cos, false), kick(Wave::Sin, false), kick(Wave::Cos, true)],
            grid_n: 64,
            k_max: 31,
            kick_samples: 1024,
            kick_steps: 400,
            census: PhaseGrid { positions: 16, directions: 8, speeds: 5 },
            maxwell_census: PhaseGrid { positions: 8, directions: 4, speeds: 3 },
            sweep_particles: 24,
            sweep_factors: vec![1.0, 2.0, 4.0],
            quad_n: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduledKick {
    pub start: f64,
    pub duration: f64,
    pub impulse: f64,
    pub mode: HarmonicMode,
}

impl ScheduledKick {
    /// Potential amplitude and its time derivative.
    pub fn amplitude(&self, t: f64) -> (f64, f64) {
        let (p, dp) = pulse((t - self.start) / self.duration);
        (self.impulse * p / self.duration, self.impulse * dp / (self.duration * self.duration))
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

/// Strip-case reference: `φ̄ = Σ a_i(t) Φ_i`, `ρ̄ = Δφ̄`, `j̄ = −Σ ȧ_i u_i`.
#[derive(Debug, Clone)]
pub struct StripPlan {
    pub config: StripPlanConfig,
    pub omega: ControlSet,
    pub geometry: StripGeometry,
    pub grid: GridSpec,
    pub segments: Vec<Segment>,
    pub kicks: Vec<ScheduledKick>,
    pub t_end: f64,
    /// Spectral `ΔΦ_i`, mean removed.
    pub lap: Vec<SpectralScalar>,
    /// Correction `u_i` with `div u_i = ΔΦ_i`.
    pub corr: Vec<SpectralVector>,
    pub accel: Vec<AccelReport>,
    pub correction: CorrectionReport,
    pub bumps: BumpProfile,
}

impl StripPlan {
    pub fn target(&self) -> Ball {
        Ball::new(self.config.target_center, self.config.target_radius)
    }

    pub fn light_speed(&self) -> LightSpeed {
        LightSpeed::Finite(self.config.c)
    }

    pub fn kick_at(&self, t: f64) -> Option<usize> {
        self.kicks.iter().position(|k| t > k.start && t < k.end())
    }

    /// `∇φ̄` from the closed-form potentials.
    pub fn poisson_field(&self, t: f64, x: [f64; 2]) -> [f64; 2] {
        match self.kick_at(t) {
            Some(i) => {
                let k = &self.kicks[i];
                let a = k.amplitude(t).0;
                let g = k.mode.eval(&self.geometry, x).grad;
                [a * g[0], a * g[1]]
            }
            None => [0.0, 0.0],
        }
    }

    pub fn rho(&self, t: f64) -> SpectralScalar {
        match self.kick_at(t) {
            Some(i) => self.lap[i].scaled(self.kicks[i].amplitude(t).0),
            None => SpectralScalar::zeros(self.grid),
        }
    }

    pub fn current(&self, t: f64) -> SpectralVector {
        match self.kick_at(t) {
            Some(i) => self.corr[i].scaled(-self.kicks[i].amplitude(t).1),
            None => SpectralVector::zeros(self.grid),
        }
    }

    /// Sources over kick `i`, sampled at `kick_samples + 1` times.
    pub fn kick_sources(&self, i: usize) -> Result<SpectralSources> {
        let k = &self.kicks[i];
        let n = self.config.kick_samples;
        let dt = k.duration / n as f64;
        let mut rho = Vec::with_capacity(n + 1);
        let mut j = Vec::with_capacity(n + 1);
        for s in 0..=n {
            let (a, da) = k.amplitude(k.start + s as f64 * dt);
            rho.push(self.lap[i].scaled(a));
            j.push(self.corr[i].scaled(-da));
        }
        SpectralSources::new(k.start, dt, rho, j)
    }
}

fn cutoff_ok(cfg: &StripPlanConfig) -> Result<()> {
    if cfg.kicks.is_empty() {
        return Err(Error::InvalidInput("strip plan needs at least one kick".into()));
    }
    for k in &cfg.kicks {
        if !(k.duration > 0.0 && k.wait > 0.0 && k.impulse.is_finite()) {
            return Err(Error::InvalidInput(format!("bad kick {k:?}")));
        }
    }
    if !(cfg.lead_wait > 0.0 && cfg.c > 0.0 && cfg.speed_cap >= 0.0 && cfg.kick_samples >= 8 && cfg.kick_steps >= 8) {
        return Err(Error::InvalidInput("lead wait, c, speed cap and sample counts must be positive".into()));
    }
    if cfg.magnetic == 0.0 {
        return Err(Error::Precondition("bending needs a nonzero magnetic field".into()));
    }
    Ok(())
}

/// Lays out `bend-wait → (poisson-accelerate → bend-wait)*` and precomputes
/// the spectral charges and their corrections.
pub fn build_strip_plan(cfg: &StripPlanConfig) -> Result<StripPlan> {
    cutoff_ok(cfg)?;
    let omega = ControlSet::strip(cfg.direction, cfg.offset, cfg.half_width)?;
    let geometry = StripGeometry::new(&omega, cfg.band)?;
    let target = Ball::new(cfg.target_center, cfg.target_radius);
    if !omega.contains_eroded(target.center, target.radius) {
        return Err(Error::Precondition("target ball must lie inside ω".into()));
    }
    let grid = GridSpec::new(cfg.grid_n, cfg.k_max)?;
    let mut segments = vec![Segment { start: 0.0, duration: cfg.lead_wait, mode: SegmentMode::BendWait }];
    let mut kicks = Vec::new();
    let mut t = cfg.lead_wait;
    for k in &cfg.kicks {
        kicks.push(ScheduledKick {
            start: t,
            duration: k.duration,
            impulse: k.impulse,
            mode: HarmonicMode { wave: k.wave, growing: k.growing },
        });
        segments.push(Segment { start: t, duration: k.duration, mode: SegmentMode::PoissonAccelerate });
        t += k.duration;
        segments.push(Segment { start: t, duration: k.wait, mode: SegmentMode::BendWait });
        t += k.wait;
    }
    let mut lap = Vec::new();
    let mut accel = Vec::new();
    for k in &kicks {
        let mode = k.mode;
        let report = check_accel_field(&|x| mode.eval(&geometry, x).grad, &geometry, grid)?;
        if !report.valid {
            return Err(Error::Numerical(format!("harmonic mode {mode:?} fails its checks: {report:?}")));
        }
        accel.push(report);
        let h = to_spectral(&ScalarField::from_fn(grid, |x| mode.eval(&geometry, x).lap))?;
        lap.push(h.map_modes(|q, z| if q == [0, 0] { Complex64::new(0.0, 0.0) } else { z }));
    }
    let (corr, correction) = charge_correction(&lap, &omega, cfg.band, cfg.inner)?;
    let bumps = make_bumps(cfg.quad_n, LightSpeed::Finite(cfg.c))?;
    Ok(StripPlan { config: cfg.clone(), omega, geometry, grid, segments, kicks, t_end: t, lap, corr, accel, correction, bumps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConservationReport {
    /// Sup over samples of `|∂ₜρ̄ + div j̄|` relative to `sup |∂ₜρ̄|`.
    pub lcc: f64,
    pub lcc_absolute: f64,
    /// Sup over samples of `|∫ j̄ dx|`.
    pub zero_mean: f64,
    pub samples: usize,
}

/// Local conservation and zero-mean current at every source sample.
pub fn check_conservation(plan: &StripPlan) -> ConservationReport {
    let mut abs: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let mut zm: f64 = 0.0;
    let mut samples = 0;
    for (i, k) in plan.kicks.iter().enumerate() {
        let balance = to_real(&divergence(&plan.corr[i]).axpy(-1.0, &plan.lap[i]).expect("same grid"));
        let lap = to_real(&plan.lap[i]).sup_norm();
        let n = plan.config.kick_samples;
        for s in 0..=n {
            let da = k.amplitude(k.start + s as f64 * k.duration / n as f64).1;
            // ∂ₜρ̄ + div j̄ = ȧ (ΔΦ − div u)
            abs = abs.max(da.abs() * balance.sup_norm());
            scale = scale.max(da.abs() * lap);
            let m = plan.corr[i].mean();
            zm = zm.max(da.abs() * m[0].hypot(m[1]));
            samples += 1;
        }
    }
    ConservationReport { lcc: abs / scale.max(f64::MIN_POSITIVE), lcc_absolute: abs, zero_mean: zm, samples }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupportReport {
    /// Largest `|ρ̄|` or `|j̄|` outside ω over the sampled times, relative to the largest inside.
    pub moments_outside: f64,
    /// Largest `|Ḡ|` outside ω relative to the largest anywhere.
    pub source_outside: f64,
    /// `|a|`, `|ȧ|` at `t = 0` and `t = T`.
    pub endpoint: f64,
}

/// Support of the moments and of `Ḡ = ∂ₜf̄ + v̂·∇ₓf̄ + (∇φ̄ + 𝔟v̂⊥)·∇ᵥf̄`,
/// by spectral `x`-derivatives and centred `v`-differences.
pub fn check_support(plan: &StripPlan) -> Result<SupportReport> {
    let c = plan.light_speed();
    let bumps = &plan.bumps;
    let mut inside: f64 = 0.0;
    let mut outside: f64 = 0.0;
    let mut g_in: f64 = 0.0;
    let mut g_out: f64 = 0.0;
    let vs: Vec<[f64; 2]> = (0..9)
        .flat_map(|a| (0..9).map(move |b| [-0.8 + 0.2 * a as f64, -0.8 + 0.2 * b as f64]))
        .filter(|v| v[0].hypot(v[1]) < 0.95)
        .collect();
    let hv = 1e-5;
    let dz = |f: &dyn Fn([f64; 2]) -> f64, v: [f64; 2]| {
        [
            (f([v[0] + hv, v[1]]) - f([v[0] - hv, v[1]])) / (2.0 * hv),
            (f([v[0], v[1] + hv]) - f([v[0], v[1] - hv])) / (2.0 * hv),
        ]
    };
    for (i, k) in plan.kicks.iter().enumerate() {
        let lap = to_real(&plan.lap[i]);
        let lap_grad = to_real_vector(&gradient(&plan.lap[i]));
        let u = to_real_vector(&plan.corr[i]);
        let du = [to_real_vector(&gradient(&plan.corr[i].component(0))), to_real_vector(&gradient(&plan.corr[i].component(1)))];
        for frac in [0.25, 0.5, 0.7] {
            let t = k.start + frac * k.duration;
            let (a, da) = k.amplitude(t);
            // second derivative of the amplitude by differences
            let ht = 1e-6 * k.duration;
            let dda = (k.amplitude(t + ht).1 - k.amplitude(t - ht).1) / (2.0 * ht);
            for (node, x) in plan.grid.nodes() {
                let rho = a * lap.values()[node];
                let j = [-da * u.component_values(0)[node], -da * u.component_values(1)[node]];
                let mag = rho.abs().max(j[0].hypot(j[1]));
                let out = !plan.omega.contains(x);
                if out {
                    outside = outside.max(mag);
                } else {
                    inside = inside.max(mag);
                }
                if node % 7 != 0 && out {
                    continue;
                }
                let e = plan.poisson_field(t, x);
                let l = lap.values()[node];
                let lg = [lap_grad.component_values(0)[node], lap_grad.component_values(1)[node]];
                let uu = [u.component_values(0)[node], u.component_values(1)[node]];
                let ug = [
                    [du[0].component_values(0)[node], du[0].component_values(1)[node]],
                    [du[1].component_values(0)[node], du[1].component_values(1)[node]],
                ];
                for &v in &vs {
                    let vh = crate::characteristics::relativistic_velocity(v, c);
                    let z = bumps.z(v);
                    let z1 = bumps.zi(0, v);
                    let z2 = bumps.zi(1, v);
                    let dt_f = da * l * z - dda * (uu[0] * z1 + uu[1] * z2);
                    let gx = [
                        a * lg[0] * z - da * (ug[0][0] * z1 + ug[1][0] * z2),
                        a * lg[1] * z - da * (ug[0][1] * z1 + ug[1][1] * z2),
                    ];
                    let f_at = |w: [f64; 2]| a * l * bumps.z(w) - da * (uu[0] * bumps.zi(0, w) + uu[1] * bumps.zi(1, w));
                    let gv = dz(&f_at, v);
                    let force = [e[0] + plan.config.magnetic * vh[1], e[1] - plan.config.magnetic * vh[0]];
                    let g = dt_f + vh[0] * gx[0] + vh[1] * gx[1] + force[0] * gv[0] + force[1] * gv[1];
                    if out {
                        g_out = g_out.max(g.abs());
                    } else {
                        g_in = g_in.max(g.abs());
                    }
                }
            }
        }
    }
    let mut endpoint: f64 = 0.0;
    for k in &plan.kicks {
        for t in [0.0, plan.t_end] {
            let (a, da) = k.amplitude(t);
            endpoint = endpoint.max(a.abs()).max(da.abs());
        }
    }
    Ok(SupportReport {
        moments_outside: outside / inside.max(f64::MIN_POSITIVE),
        source_outside: g_out / g_in.max(f64::MIN_POSITIVE),
        endpoint,
    })
}

/// Exact motion under a constant magnetic field alone.
pub fn magnetic_arc(s: PhaseState, b: f64, c: LightSpeed, t: f64) -> PhaseState {
    let g = c.lorentz(s.v);
    let w = b / g;
    let half = 0.5 * w * t;
    let sinc = if half.abs() < 1e-8 { 1.0 - half * half / 6.0 } else { half.sin() / half };
    let rot = |v: [f64; 2], a: f64| [v[0] * a.cos() + v[1] * a.sin(), -v[0] * a.sin() + v[1] * a.cos()];
    let drift = rot(s.v, half);
    PhaseState {
        x: [s.x[0] + drift[0] * t * sinc / g, s.x[1] + drift[1] * t * sinc / g],
        v: rot(s.v, w * t),
    }
}

/// Hit test for one census: ball, minimum speed and time window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HitRule {
    pub center: [f64; 2],
    pub radius: f64,
    pub min_speed: f64,
    pub window: (f64, f64),
}

impl HitRule {
    fn tol(&self) -> f64 {
        self.radius / 50.0
    }

    fn chord(&self, t: f64, a: &PhaseState, b: &PhaseState) -> Option<f64> {
        if t < self.window.0 || t > self.window.1 || a.speed() < self.min_speed || b.speed() < self.min_speed {
            return None;
        }
        segment_lattice_entry(a.x, b.x, self.center, self.radius - self.tol())
    }
}

/// A particle being traced stage by stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tracer {
    pub start: PhaseState,
    pub state: PhaseState,
    pub hit: Option<f64>,
    pub min_speed_after_kick: f64,
}

impl Tracer {
    fn new(s: PhaseState) -> Self {
        Self { start: s, state: s, hit: None, min_speed_after_kick: f64::INFINITY }
    }
}

/// Magnetic wait on `[t0, t1]` by exact arcs, testing chords for hits.
fn wait_stage(p: &mut Tracer, b: f64, c: LightSpeed, t0: f64, t1: f64, rule: &HitRule) {
    let s = p.state.wrapped();
    let lo = rule.window.0.max(t0);
    let hi = rule.window.1.min(t1);
    if p.hit.is_some() || hi <= lo || s.speed() < rule.min_speed {
        p.state = magnetic_arc(s, b, c, t1 - t0);
        return;
    }
    let mut cur = magnetic_arc(s, b, c, lo - t0);
    let radius = s.speed() / b.abs();
    let dphi = (8.0 * rule.tol() / radius).sqrt().min(0.05);
    let w = b.abs() / c.lorentz(s.v);
    // also cap the chord length so long free flights stay cheap per step
    let dt = (dphi / w).min(50.0 / (s.speed() / c.lorentz(s.v)));
    let mut t = lo;
    while t < hi {
        let h = dt.min(hi - t);
        let next = magnetic_arc(cur, b, c, h);
        if let Some(f) = rule.chord(t, &cur, &next) {
            p.hit = Some(t + f * h);
            break;
        }
        cur = next;
        t += h;
    }
    p.state = magnetic_arc(s, b, c, t1 - t0);
}

/// RK4 through `[t0, t1]` with at least `steps` steps, refined by speed.
fn kick_stage(p: &mut Tracer, force: &ForceSpec, t0: f64, t1: f64, steps: usize, rule: &HitRule) {
    let base = (t1 - t0) / steps as f64;
    let mut s = p.state.wrapped();
    let mut t = t0;
    while t < t1 {
        let vh = s.speed() / force.c.lorentz(s.v);
        let h = base.min(0.002 / vh.max(1e-300)).min(t1 - t);
        let next = rk4_step(s, t, h, force);
        if p.hit.is_none() {
            if let Some(f) = rule.chord(t, &s, &next) {
                p.hit = Some(t + f * h);
            }
        }
        s = next;
        t += h;
    }
    p.state = s;
    p.min_speed_after_kick = p.min_speed_after_kick.min(s.speed());
}

/// Field provider for kick `i`.
pub type KickFields<'a> = &'a dyn Fn(usize) -> Result<Box<dyn FieldProvider + Sync + 'a>>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanCensus {
    pub rule: HitRule,
    pub total: usize,
    pub hits: usize,
    pub hit_fraction: f64,
    pub min_speed_after_kicks: f64,
    /// Missed samples.
    pub misses: Vec<Tracer>,
}

/// Traces samples through the plan: exact arcs with `b_wait` during waits,
/// RK4 under `kick_fields(i)` and `b_kick` during kick `i`.
pub fn trace_plan<'a>(plan: &'a StripPlan, samples: &[PhaseState], rule: HitRule, c: LightSpeed, kick_fields: KickFields<'a>) -> Result<PlanCensus> {
    let b = plan.config.magnetic;
    let mut tracers: Vec<Tracer> = samples.iter().map(|s| Tracer::new(*s)).collect();
    let mut t = 0.0;
    for seg in &plan.segments {
        match seg.mode {
            SegmentMode::BendWait => {
                tracers.par_iter_mut().for_each(|p| wait_stage(p, b, c, seg.start, seg.end(), &rule));
            }
            SegmentMode::PoissonAccelerate => {
                let i = plan.kick_at(seg.start + 0.5 * seg.duration).expect("kick segment");
                let fields = kick_fields(i)?;
                let fields: &(dyn FieldProvider + Sync) = fields.as_ref();
                let steps = plan.config.kick_steps;
                tracers.par_iter_mut().for_each(|p| {
                    let force = ForceSpec::new(fields, c);
                    kick_stage(p, &force, seg.start, seg.end(), steps, &rule)
                });
            }
            _ => return Err(Error::InvalidInput("strip plans contain only waits and kicks".into())),
        }
        t = seg.end();
    }
    debug_assert!((t - plan.t_end).abs() < 1e-9 * plan.t_end);
    let hits = tracers.iter().filter(|p| p.hit.is_some()).count();
    let min_speed = tracers.iter().map(|p| p.min_speed_after_kick).fold(f64::INFINITY, f64::min);
    let misses: Vec<Tracer> = tracers.iter().filter(|p| p.hit.is_none()).copied().collect();
    Ok(PlanCensus {
        rule,
        total: tracers.len(),
        hits,
        hit_fraction: hits as f64 / tracers.len().max(1) as f64,
        min_speed_after_kicks: min_speed,
        misses,
    })
}

/// Closed-form Poisson force of the plan plus the external magnetic field.
pub struct PoissonReference<'a> {
    pub plan: &'a StripPlan,
}

impl FieldProvider for PoissonReference<'_> {
    fn fields(&self, t: f64, x: [f64; 2]) -> ([f64; 2], f64) {
        (self.plan.poisson_field(t, x), self.plan.config.magnetic)
    }
}

/// Cond-4 census: `B(x₀, r₀/2)` with `|V| ≥ 5` during `[T/9, 8T/9]`.
pub fn poisson_census(plan: &StripPlan, grid: &PhaseGrid) -> Result<PlanCensus> {
    let rule = HitRule {
        center: plan.config.target_center,
        radius: plan.config.target_radius / 2.0,
        min_speed: 5.0,
        window: (plan.t_end / 9.0, 8.0 * plan.t_end / 9.0),
    };
    let samples = grid.samples(plan.config.speed_cap);
    let fields = |_i: usize| -> Result<Box<dyn FieldProvider + Sync + '_>> { Ok(Box::new(PoissonReference { plan })) };
    trace_plan(plan, &samples, rule, plan.light_speed(), &fields)
}

/// Field snapshots of one kick, at the source sample times.
#[derive(Debug, Clone)]
pub struct KickSnapshots {
    pub maxwell: SampledFields,
    pub poisson: SampledFields,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RemnantReport {
    /// After a kick: sup of `|E|` and of `|b − c𝔟|/c`.
    pub e: f64,
    pub b: f64,
    /// Bound on the velocity change the free waves can cause over the
    /// following wait for particles slower than `c/2`: each mode oscillates
    /// along the path at rate at least `c|ξ|/2`, and the mean of `E` acts
    /// for the whole wait.
    pub velocity_bound: f64,
}

fn remnant(state: &SpectralState, c: f64, wait: f64) -> RemnantReport {
    let grid = state.grid();
    let e = to_real_vector(&state.e).sup_norm();
    let mut bound = 0.0;
    let mut mean_b = 0.0;
    for (i, k) in grid.modes() {
        let amp = state.e.coeffs(0)[i].norm().hypot(state.e.coeffs(1)[i].norm());
        if k == [0, 0] {
            bound += amp * wait;
            mean_b = state.b.coeffs()[i].re;
            continue;
        }
        bound += 4.0 * (amp + state.b.coeffs()[i].norm()) / (c * crate::spectral::xi_norm(k));
    }
    let b = to_real(&state.b).map(|x| (x - mean_b) / c).sup_norm();
    RemnantReport { e, b, velocity_bound: bound }
}

/// Maxwell evolution of the plan at light speed `c` from `(0, c𝔟)`.
///
/// Fields are streamed per kick; waits are propagated exactly with zero
/// sources. Returns per-kick snapshots (magnetic input already divided by
/// `c`) and the free-wave remnant after each kick.
pub fn maxwell_snapshots(plan: &StripPlan, c: f64) -> Result<(Vec<KickSnapshots>, Vec<RemnantReport>)> {
    let grid = plan.grid;
    let mut state = SpectralState::zero(grid);
    state.b.coeffs_mut()[grid.mode_index([0, 0]).expect("mode 0")] = Complex64::new(c * plan.config.magnetic, 0.0);
    let mut snaps = Vec::new();
    let mut remnants = Vec::new();
    let real = |s: &SpectralState| -> (VectorField, ScalarField) {
        (to_real_vector(&s.e), to_real(&s.b).scaled(1.0 / c))
    };
    for (i, seg) in plan.segments.iter().enumerate() {
        match seg.mode {
            SegmentMode::BendWait => {
                if i > 0 {
                    remnants.push(remnant(&state, c, seg.duration));
                }
                let src = SpectralSources::zero(grid, seg.start, seg.duration, 2)?;
                state.t = seg.start;
                state = evolve_spectral(&state, c, &src, seg.end(), |_| {})?;
            }
            SegmentMode::PoissonAccelerate => {
                let k = plan.kick_at(seg.start + 0.5 * seg.duration).expect("kick");
                let src = plan.kick_sources(k)?;
                state.t = seg.start;
                let (e0, b0) = real(&state);
                let mut me = vec![e0];
                let mut mb = vec![b0];
                state = evolve_spectral(&state, c, &src, seg.end(), |s| {
                    let (e, b) = real(s);
                    me.push(e);
                    mb.push(b);
                })?;
                let mut pe = Vec::with_capacity(src.len());
                for s in 0..src.len() {
                    pe.push(to_real_vector(&poisson_spectral(&src.rho[s])));
                }
                let pb = vec![ScalarField::constant(grid, plan.config.magnetic); src.len()];
                snaps.push(KickSnapshots {
                    maxwell: SampledFields::new(src.t0, src.dt, me, mb)?,
                    poisson: SampledFields::new(src.t0, src.dt, pe, pb)?,
                });
            }
            _ => return Err(Error::InvalidInput("strip plans contain only waits and kicks".into())),
        }
    }
    Ok((snaps, remnants))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaxwellCensus {
    pub census: PlanCensus,
    pub remnants: Vec<RemnantReport>,
}

/// Cond-5 census: `B(x₀, r₀)` with `|V| ≥ 4` during `[T/10, 9T/10]` under
/// the Maxwell fields generated by `(ρ̄, j̄)`; waits use the mean field `𝔟`.
pub fn maxwell_census(plan: &StripPlan, grid: &PhaseGrid) -> Result<MaxwellCensus> {
    let (snaps, remnants) = maxwell_snapshots(plan, plan.config.c)?;
    let rule = HitRule {
        center: plan.config.target_center,
        radius: plan.config.target_radius,
        min_speed: 4.0,
        window: (plan.t_end / 10.0, 9.0 * plan.t_end / 10.0),
    };
    let samples = grid.samples(plan.config.speed_cap);
    let fields = |i: usize| -> Result<Box<dyn FieldProvider + Sync + '_>> { Ok(Box::new(snaps[i].maxwell.clone())) };
    let census = trace_plan(plan, &samples, rule, plan.light_speed(), &fields)?;
    Ok(MaxwellCensus { census, remnants })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationRow {
    pub c: f64,
    /// Sup over particles and stages of `|X_M − X_P|` at the end of the
    /// wait that follows each kick, both started together at the kick.
    pub position: f64,
    /// Same for `|V_M − V_P|`.
    pub velocity: f64,
    /// Phase-space deviation when the Maxwell particles are never restarted.
    pub compounded: f64,
    pub remnant_velocity_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationSweep {
    pub rows: Vec<DeviationRow>,
    /// Successive ratios of the stage deviation `position + velocity` when `c` doubles.
    pub ratios: Vec<f64>,
    /// Every ratio at most one half.
    pub halves: bool,
}

fn fixed_steps(p: &mut PhaseState, force: &ForceSpec, t0: f64, t1: f64, steps: usize) {
    let h = (t1 - t0) / steps as f64;
    for q in 0..steps {
        *p = rk4_step(*p, t0 + q as f64 * h, h, force);
    }
}

fn phase_gap(a: &[PhaseState], b: &[PhaseState]) -> (f64, f64) {
    a.iter().zip(b).fold((0.0f64, 0.0f64), |(dx, dv), (p, q)| {
        let d = [p.x[0] - q.x[0], p.x[1] - q.x[1]].map(|d| d - d.round());
        (dx.max(d[0].hypot(d[1])), dv.max((p.v[0] - q.v[0]).hypot(p.v[1] - q.v[1])))
    })
}

/// Maxwell-driven against Poisson-driven characteristics of a particle
/// subset, both over the same grid fields and the same fixed steps.
///
/// Each stage is one kick and the wait after it. Both families restart from
/// the Poisson state at the kick, since later kicks amplify any earlier gap
/// by the gradient of the kick field times the wait.
pub fn deviation_sweep(plan: &StripPlan, c_values: &[f64]) -> Result<DeviationSweep> {
    let n = plan.config.sweep_particles.max(1);
    let side = (n as f64).sqrt().ceil() as usize;
    let starts: Vec<PhaseState> = (0..n)
        .map(|q| {
            let x = [((q % side) as f64 + 0.31) / side as f64, ((q / side) as f64 + 0.62) / side as f64];
            let th = 2.399_963 * q as f64;
            let s = plan.config.speed_cap * ((q % 3) as f64) / 2.0;
            PhaseState::new(x, [s * th.cos(), s * th.sin()])
        })
        .collect();
    let b = plan.config.magnetic;
    let mut rows = Vec::new();
    for &c in c_values {
        let ls = LightSpeed::Finite(c);
        let (snaps, remnants) = maxwell_snapshots(plan, c)?;
        let remnant = remnants.iter().map(|r| r.velocity_bound).fold(0.0, f64::max);
        let mut pp = starts.clone();
        let mut pm = starts.clone();
        let mut pg = starts.clone();
        let (mut dx, mut dv, mut comp): (f64, f64, f64) = (0.0, 0.0, 0.0);
        let mut ki = 0;
        for seg in &plan.segments {
            match seg.mode {
                SegmentMode::BendWait => {
                    for p in pm.iter_mut().chain(pp.iter_mut()).chain(pg.iter_mut()) {
                        *p = magnetic_arc(*p, b, ls, seg.duration);
                    }
                    if ki > 0 {
                        let (x, v) = phase_gap(&pm, &pp);
                        dx = dx.max(x);
                        dv = dv.max(v);
                        let (x, v) = phase_gap(&pg, &pp);
                        comp = comp.max(x + v);
                    }
                }
                SegmentMode::PoissonAccelerate => {
                    let (fm, fp) = (&snaps[ki].maxwell, &snaps[ki].poisson);
                    let steps = 2 * plan.config.kick_samples;
                    pm.clone_from(&pp);
                    let (t0, t1) = (seg.start, seg.end());
                    pm.par_iter_mut().for_each(|p| fixed_steps(p, &ForceSpec::new(fm, ls), t0, t1, steps));
                    pg.par_iter_mut().for_each(|p| fixed_steps(p, &ForceSpec::new(fm, ls), t0, t1, steps));
                    pp.par_iter_mut().for_each(|p| fixed_steps(p, &ForceSpec::new(fp, ls), t0, t1, steps));
                    ki += 1;
                }
                _ => return Err(Error::InvalidInput("strip plans contain only waits and kicks".into())),
            }
        }
        rows.push(DeviationRow { c, position: dx, velocity: dv, compounded: comp, remnant_velocity_bound: remnant });
    }
    let ratios: Vec<f64> = rows
        .windows(2)
        .map(|w| (w[1].position + w[1].velocity) / (w[0].position + w[0].velocity).max(f64::MIN_POSITIVE))
        .collect();
    let doubling = c_values.windows(2).all(|w| (w[1] / w[0] - 2.0).abs() < 1e-12);
    let halves = doubling && !ratios.is_empty() && ratios.iter().all(|&r| r <= 0.5);
    Ok(DeviationSweep { rows, ratios, halves })
}

/// Sampled `ρ̄` and `j̄` of the plan as raw bytes, for reproducibility checks.
pub fn source_bytes(plan: &StripPlan) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for i in 0..plan.kicks.len() {
        let src = plan.kick_sources(i)?;
        for s in 0..src.len() {
            for z in src.rho[s].coeffs().iter().chain(src.j[s].coeffs(0)).chain(src.j[s].coeffs(1)) {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StripReport {
    pub conservation: ConservationReport,
    pub support: SupportReport,
    pub correction: CorrectionReport,
    pub accel: Vec<AccelReport>,
    /// Closed-form Poisson census against `B(x₀, r₀/2)`.
    pub poisson: PlanCensus,
    /// Maxwell-driven census against `B(x₀, r₀)`.
    pub maxwell: MaxwellCensus,
    pub sweep: DeviationSweep,
    /// `ρ̄, j̄` byte-identical for `c` and `2c`.
    pub c_independent: bool,
}

/// Builds the strip plan and runs every check on it.
pub fn assemble_reference_strip(cfg: &StripPlanConfig) -> Result<(StripPlan, StripReport)> {
    let plan = build_strip_plan(cfg)?;
    let doubled = build_strip_plan(&StripPlanConfig { c: 2.0 * cfg.c, ..cfg.clone() })?;
    let c_values: Vec<f64> = cfg.sweep_factors.iter().map(|f| f * cfg.c).collect();
    let report = StripReport {
        conservation: check_conservation(&plan),
        support: check_support(&plan)?,
        correction: plan.correction,
        accel: plan.accel.clone(),
        poisson: poisson_census(&plan, &cfg.census)?,
        maxwell: maxwell_census(&plan, &cfg.maxwell_census)?,
        sweep: deviation_sweep(&plan, &c_values)?,
        c_independent: source_bytes(&plan)? == source_bytes(&doubled)?,
    };
    Ok((plan, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StripPlanConfig {
        StripPlanConfig {
            census: PhaseGrid { positions: 6, directions: 4, speeds: 3 },
            maxwell_census: PhaseGrid { positions: 3, directions: 2, speeds: 2 },
            ..StripPlanConfig::default()
        }
    }

    #[test]
    fn pulse_has_unit_mass_and_matching_derivative() {
        let n = 20_000;
        let mass: f64 = (0..n).map(|i| pulse((i as f64 + 0.5) / n as f64).0).sum::<f64>() / n as f64;
        assert!((mass - 1.0).abs() < 1e-8, "{mass}");
        for u in [0.1, 0.3, 0.55, 0.9] {
            let h = 1e-6;
            let fd = (pulse(u + h).0 - pulse(u - h).0) / (2.0 * h);
            assert!((fd - pulse(u).1).abs() < 1e-5 * (1.0 + fd.abs()));
        }
        assert_eq!(pulse(0.0), (0.0, 0.0));
        assert_eq!(pulse(1.0), (0.0, 0.0));
    }

    #[test]
    fn magnetic_arc_matches_rk4_and_reverses() {
        let g = GridSpec::new(8, 3).unwrap();
        let c = LightSpeed::Finite(3.0);
        let fields = SampledFields::single(VectorField::zeros(g), ScalarField::constant(g, 1.5));
        let force = ForceSpec::new(&fields, c);
        let s0 = PhaseState::new([0.2, 0.7], [1.3, -0.4]);
        let mut s = s0;
        let steps = 4000;
        for q in 0..steps {
            s = rk4_step(s, q as f64 * 1e-3, 1e-3, &force);
        }
        let a = magnetic_arc(s0, 1.5, c, steps as f64 * 1e-3);
        for i in 0..2 {
            assert!((a.x[i] - s.x[i]).abs() < 1e-9 && (a.v[i] - s.v[i]).abs() < 1e-9);
        }
        let back = magnetic_arc(a, 1.5, c, -(steps as f64) * 1e-3);
        for i in 0..2 {
            assert!((back.x[i] - s0.x[i]).abs() < 1e-12 && (back.v[i] - s0.v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn plan_conserves_charge_with_zero_mean_current() {
        let plan = build_strip_plan(&small()).unwrap();
        let r = check_conservation(&plan);
        assert!(r.lcc < 1e-6, "{r:?}");
        assert!(r.zero_mean < 1e-10, "{r:?}");
        assert!(plan.correction.alpha.abs() < 1e-12);
        let s = check_support(&plan).unwrap();
        assert_eq!(s.endpoint, 0.0);
        assert!(s.moments_outside < 1e-3, "{s:?}");
    }

    #[test]
    fn sources_do_not_depend_on_light_speed() {
        let cfg = small();
        let a = build_strip_plan(&cfg).unwrap();
        let b = build_strip_plan(&StripPlanConfig { c: 2.0 * cfg.c, ..cfg }).unwrap();
        assert_eq!(source_bytes(&a).unwrap(), source_bytes(&b).unwrap());
    }

    #[test]
    fn census_reaches_target_and_fails_without_kicks() {
        let plan = build_strip_plan(&small()).unwrap();
        let census = poisson_census(&plan, &plan.config.census).unwrap();
        assert_eq!(census.hits, census.total);
        let mut cfg = small();
        for k in &mut cfg.kicks {
            k.impulse = 0.0;
        }
        let idle = build_strip_plan(&cfg).unwrap();
        let census = poisson_census(&idle, &cfg.census).unwrap();
        assert!(census.hit_fraction < 0.5, "{}", census.hit_fraction);
    }

    #[test]
    fn rejects_target_outside_strip() {
        let cfg = StripPlanConfig { target_center: [0.5, 0.0], ..small() };
        assert!(build_strip_plan(&cfg).is_err());
    }
}
