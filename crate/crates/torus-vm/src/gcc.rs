//! Reference plan for a ball-union control set satisfying the geometric
//! control condition: idle, Maxwell steering up to a constant electric
//! field, a hold under that field, and the reversed steering back to rest.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::{rk4_step, ForceSpec, LightSpeed, PhaseState, SampledFields};
use crate::control::{cross_chain, solve_steering, ControlBasis, ControlCurrent, SteeringProblem, SteeringSolution};
use crate::error::{Error, Result};
use crate::geometry::{check_gcc, segment_lattice_entry, Ball, ControlSet, GccOptions, GccReport};
use crate::maxwell::{evolve_spectral, SpectralSources, SpectralState};
use crate::plan::{PhaseGrid, Segment, SegmentMode};
use crate::reference::{lift_current, make_bumps, BumpProfile};
use crate::spectral::{to_real, to_real_vector, GridSpec, ScalarField, VectorField};

/// Speed every census particle must exceed inside `ω′`.
pub const HIT_SPEED: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GccPlanConfig {
    /// Balls per chain of the cross-shaped control set.
    pub per_chain: usize,
    pub radius: f64,
    /// `ω′` is the union of the balls shrunk by this much.
    pub erosion: f64,
    pub c: f64,
    pub grid_n: usize,
    pub k_max: usize,
    pub idle: f64,
    pub steer: f64,
    /// Hold duration; found from the census when absent.
    pub hold: Option<f64>,
    /// Relative slack added to the empirical hold.
    pub hold_margin: f64,
    /// Largest hold tried by the empirical search.
    pub hold_cap: f64,
    pub basis_levels: usize,
    pub profiles: usize,
    pub reg: f64,
    pub source_samples: usize,
    /// Sample spacing of the hold fields.
    pub hold_dt: f64,
    /// RK4 step for the census.
    pub step: f64,
    pub max_residual: f64,
    pub speed_cap: f64,
    /// Speed of the free-flight census during the idle segment.
    pub fast_speed: f64,
    pub census: PhaseGrid,
    pub fast_census: PhaseGrid,
    pub quad_n: usize,
}

impl Default for GccPlanConfig {
    fn default() -> Self {
        Self {
            per_chain: 8,
            radius: 0.1,
            erosion: 0.02,
            c: 1.0,
            grid_n: 16,
            k_max: 3,
            idle: 2.0,
            steer: 1.0,
            hold: None,
            hold_margin: 0.1,
            hold_cap: 50.0,
            basis_levels: 2,
            profiles: 6,
            reg: 1e-10,
            source_samples: 400,
            hold_dt: 0.05,
            step: 0.005,
            max_residual: 1e-3,
            speed_cap: 2.0,
            fast_speed: 8.0,
            census: PhaseGrid { positions: 8, directions: 8, speeds: 3 },
            fast_census: PhaseGrid { positions: 16, directions: 32, speeds: 2 },
            quad_n: 128,
        }
    }
}

/// Hits of the eroded balls at speed at least `min_speed` during `window`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BallRule {
    pub balls: Vec<Ball>,
    pub min_speed: f64,
    pub window: (f64, f64),
}

impl BallRule {
    fn chord(&self, t: f64, a: &PhaseState, b: &PhaseState) -> Option<f64> {
        if t < self.window.0 || t > self.window.1 || a.speed() < self.min_speed || b.speed() < self.min_speed {
            return None;
        }
        self.balls
            .iter()
            .filter_map(|ball| segment_lattice_entry(a.x, b.x, ball.center, ball.radius))
            .min_by(f64::total_cmp)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GccPlan {
    pub config: GccPlanConfig,
    pub omega: ControlSet,
    pub balls: Vec<Ball>,
    /// Balls of `ω′`.
    pub inner_balls: Vec<Ball>,
    pub gcc: GccReport,
    pub segments: Vec<Segment>,
    pub t_end: f64,
    pub up: SteeringSolution,
    pub down: ControlCurrent,
    /// Largest hold time the census needed before the margin.
    pub hold_needed: f64,
    #[serde(skip)]
    pub bumps: BumpProfile,
    /// Fields of the steering and hold segments, magnetic input divided by `c`.
    #[serde(skip)]
    pub fields: Vec<SampledFields>,
    #[serde(skip)]
    pub final_state: SpectralState,
}

impl GccPlan {
    pub fn light_speed(&self) -> LightSpeed {
        LightSpeed::Finite(self.config.c)
    }

    pub fn grid(&self) -> GridSpec {
        self.final_state.grid()
    }

    fn current_at(&self, t: f64) -> Option<(f64, &ControlCurrent)> {
        let s = &self.segments;
        if t > s[1].start && t < s[1].end() {
            Some((t - s[1].start, &self.up.current))
        } else if t > s[3].start && t < s[3].end() {
            Some((t - s[3].start, &self.down))
        } else {
            None
        }
    }

    /// Current of the plan; zero outside the steering segments.
    pub fn current(&self, t: f64, x: [f64; 2]) -> [f64; 2] {
        self.current_at(t).map_or([0.0; 2], |(s, j)| j.at(s, x))
    }
}

fn validate(cfg: &GccPlanConfig) -> Result<()> {
    let positive = [cfg.radius, cfg.c, cfg.idle, cfg.steer, cfg.hold_dt, cfg.step, cfg.speed_cap, cfg.fast_speed];
    if positive.iter().any(|v| !(*v > 0.0)) || cfg.hold.is_some_and(|h| !(h > 0.0)) {
        return Err(Error::InvalidInput("durations, radii, speeds and steps must be positive".into()));
    }
    if !(cfg.erosion > 0.0 && cfg.erosion < cfg.radius) {
        return Err(Error::InvalidInput("erosion must lie in (0, radius)".into()));
    }
    if cfg.speed_cap >= HIT_SPEED {
        return Err(Error::InvalidInput(format!("initial speeds must stay below {HIT_SPEED}")));
    }
    Ok(())
}

/// Zero-source Maxwell evolution over `duration`, sampled every `dt`.
fn free_segment(state: &SpectralState, c: f64, start: f64, duration: f64, dt: f64) -> Result<(SpectralState, SampledFields)> {
    let n = ((duration / dt).ceil() as usize).max(1);
    let src = SpectralSources::zero(state.grid(), 0.0, duration / n as f64, n + 1)?;
    driven_segment(state, c, &src, start, duration)
}

fn driven_segment(state: &SpectralState, c: f64, src: &SpectralSources, start: f64, duration: f64) -> Result<(SpectralState, SampledFields)> {
    let real = |s: &SpectralState| (to_real_vector(&s.e), to_real(&s.b).scaled(1.0 / c));
    let mut s0 = state.clone();
    s0.t = 0.0;
    let (e0, b0) = real(&s0);
    let (mut es, mut bs) = (vec![e0], vec![b0]);
    let fin = evolve_spectral(&s0, c, src, duration, |s| {
        let (e, b) = real(s);
        es.push(e);
        bs.push(b);
    })?;
    let dt = duration / (es.len() - 1) as f64;
    Ok((fin, SampledFields::new(start, dt, es, bs)?))
}

fn rk4_through(p: &mut PhaseState, force: &ForceSpec, t0: f64, t1: f64, step: f64, mut check: impl FnMut(f64, f64, &PhaseState, &PhaseState) -> bool) {
    let mut t = t0;
    while t < t1 {
        let h = step.min(t1 - t);
        let next = rk4_step(*p, t, h, force);
        let stop = check(t, h, p, &next);
        *p = next;
        t += h;
        if stop {
            return;
        }
    }
}

/// Free flight over `duration`.
fn free_flight(s: PhaseState, c: LightSpeed, duration: f64) -> PhaseState {
    let g = c.lorentz(s.v);
    PhaseState::new([s.x[0] + s.v[0] * duration / g, s.x[1] + s.v[1] * duration / g], s.v)
}

/// Time under `E = (1, 0)`, `b = 0` until `s` enters `ω′` at speed `HIT_SPEED`.
fn hold_time(s: PhaseState, rule: &BallRule, c: LightSpeed, step: f64, cap: f64) -> Option<f64> {
    let fields = SampledFields::single(VectorField::constant(rule_grid(), [1.0, 0.0]), ScalarField::zeros(rule_grid()));
    let force = ForceSpec::new(&fields, c);
    let mut p = s;
    let mut hit = None;
    rk4_through(&mut p, &force, 0.0, cap, step, |t, h, a, b| {
        if let Some(f) = rule.chord(t, a, b) {
            hit = Some(t + f * h);
        }
        hit.is_some()
    });
    hit
}

fn rule_grid() -> GridSpec {
    GridSpec::new(8, 1).expect("constant-field grid")
}

pub fn assemble_reference_gcc(cfg: &GccPlanConfig) -> Result<GccPlan> {
    validate(cfg)?;
    let (omega, balls, bands) = cross_chain(cfg.per_chain, cfg.radius)?;
    let gcc = check_gcc(&omega, &GccOptions::default())?;
    if !gcc.holds {
        return Err(Error::Precondition(format!("control set fails the geometric control condition: {:?}", gcc.witness)));
    }
    let inner_balls: Vec<Ball> = balls.iter().map(|b| Ball::new(b.center, b.radius - cfg.erosion)).collect();
    let grid = GridSpec::new(cfg.grid_n, cfg.k_max)?;
    let c = cfg.c;
    let light = LightSpeed::new(c)?;
    let e1 = VectorField::constant(grid, [1.0, 0.0]);
    let mut problem =
        SteeringProblem::new(VectorField::zeros(grid), ScalarField::zeros(grid), e1, ScalarField::zeros(grid), c, cfg.steer, cfg.k_max)?;
    problem.reg = cfg.reg;
    problem.n_t = cfg.source_samples;
    let basis = ControlBasis::for_balls(&balls, cfg.basis_levels, &bands, cfg.profiles);
    let up = solve_steering(&problem, &basis, &omega)?;
    if up.relative_residual > cfg.max_residual {
        return Err(Error::Infeasible(format!("steering residual {:.3e} above {:.3e}", up.relative_residual, cfg.max_residual)));
    }
    let down = up.current.reversed();

    let t_up = cfg.idle;
    let t_hold = t_up + cfg.steer;
    let (after_up, up_fields) = driven_segment(&SpectralState::zero(grid), c, &up.current.spectral_sources(grid, cfg.source_samples)?, t_up, cfg.steer)?;

    let probe = BallRule { balls: inner_balls.clone(), min_speed: HIT_SPEED, window: (0.0, f64::INFINITY) };
    let samples = cfg.census.samples(cfg.speed_cap);
    let (hold, hold_needed) = match cfg.hold {
        Some(h) => (h, f64::NAN),
        None => {
            let needed = samples
                .par_iter()
                .map(|s| {
                    let mut p = free_flight(*s, light, cfg.idle);
                    let force = ForceSpec::new(&up_fields, light);
                    rk4_through(&mut p, &force, t_up, t_hold, cfg.step, |_, _, _, _| false);
                    hold_time(p, &probe, light, cfg.step, cfg.hold_cap)
                })
                .collect::<Vec<_>>();
            if needed.iter().any(Option::is_none) {
                return Err(Error::Infeasible(format!("some particles miss ω′ within a hold of {}", cfg.hold_cap)));
            }
            let tau = needed.into_iter().flatten().fold(0.0, f64::max);
            let padded = tau * (1.0 + cfg.hold_margin);
            // keep the last hit before 8T/9
            let window = 9.0 / 8.0 * (t_hold + padded) - cfg.idle - 2.0 * cfg.steer;
            (padded.max(window), tau)
        }
    };
    let t_down = t_hold + hold;
    let (after_hold, hold_fields) = free_segment(&after_up, c, t_hold, hold, cfg.hold_dt)?;
    let (final_state, down_fields) = driven_segment(&after_hold, c, &down.spectral_sources(grid, cfg.source_samples)?, t_down, cfg.steer)?;
    let segments = vec![
        Segment { start: 0.0, duration: cfg.idle, mode: SegmentMode::Idle },
        Segment { start: t_up, duration: cfg.steer, mode: SegmentMode::MaxwellSteerUp },
        Segment { start: t_hold, duration: hold, mode: SegmentMode::HoldConstantE },
        Segment { start: t_down, duration: cfg.steer, mode: SegmentMode::MaxwellSteerDown },
    ];
    Ok(GccPlan {
        config: cfg.clone(),
        omega,
        balls,
        inner_balls,
        gcc,
        t_end: t_down + cfg.steer,
        segments,
        up,
        down,
        hold_needed,
        bumps: make_bumps(cfg.quad_n, light)?,
        fields: vec![up_fields, hold_fields, down_fields],
        final_state,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GccSupportReport {
    /// Largest `|j|` on grid nodes outside `ω` over both steering segments.
    pub current_outside: f64,
    /// Largest `|∫f̄ dv|` over the sampled times.
    pub charge: f64,
    /// Largest `|∫f̄ v̂ dv − j|` relative to `sup |j|`.
    pub current_recovery: f64,
    /// `|j|` at `t = 0` and `t = T`.
    pub endpoint_current: f64,
    /// Sup of `E` and `b/c` at `t = T`, relative to the held field.
    pub final_fields: f64,
    /// Largest jump of `E` or `b/c` across a segment junction.
    pub junction_jump: f64,
}

/// Support, moment and endpoint checks of the lifted current.
pub fn check_gcc_support(plan: &GccPlan, n_times: usize) -> Result<GccSupportReport> {
    let grid = plan.grid();
    let current_outside = plan.up.current.max_outside(grid, &plan.omega, n_times).max(plan.down.max_outside(grid, &plan.omega, n_times));
    let (mut charge, mut recovery, mut scale): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for seg in [&plan.segments[1], &plan.segments[3]] {
        for s in 1..n_times {
            let t = seg.start + seg.duration * s as f64 / n_times as f64;
            let j = VectorField::from_fn(grid, |x| plan.current(t, x));
            let (rho, got) = lift_current(&j, &plan.bumps).moments();
            charge = charge.max(rho.sup_norm());
            recovery = recovery.max(got.axpy(-1.0, &j)?.sup_norm());
            scale = scale.max(j.sup_norm());
        }
    }
    let endpoint_current = [0.0, plan.t_end]
        .iter()
        .flat_map(|&t| grid.nodes().map(move |(_, x)| (t, x)))
        .map(|(t, x)| {
            let j = plan.current(t, x);
            j[0].hypot(j[1])
        })
        .fold(0.0, f64::max);
    let fin = to_real_vector(&plan.final_state.e).sup_norm().max(to_real(&plan.final_state.b).sup_norm() / plan.config.c);
    let mut junction_jump: f64 = 0.0;
    for w in plan.fields.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (ea, ba) = (a.e.last().expect("samples"), a.b.last().expect("samples"));
        junction_jump = junction_jump.max(ea.axpy(-1.0, &b.e[0])?.sup_norm()).max(ba.axpy(-1.0, &b.b[0])?.sup_norm());
    }
    let first = &plan.fields[0];
    junction_jump = junction_jump.max(first.e[0].sup_norm()).max(first.b[0].sup_norm());
    Ok(GccSupportReport {
        current_outside,
        charge,
        current_recovery: recovery / scale.max(f64::MIN_POSITIVE),
        endpoint_current,
        final_fields: fin,
        junction_jump,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GccCensus {
    pub rule: BallRule,
    pub total: usize,
    pub hits: usize,
    pub hit_fraction: f64,
    pub earliest_hit: f64,
    pub latest_hit: f64,
    /// Missed samples, as initial states.
    pub misses: Vec<PhaseState>,
}

/// Traces `samples` through the whole plan and counts entries into `ω′` at
/// speed at least `HIT_SPEED` during `[T/9, 8T/9]`.
pub fn gcc_census(plan: &GccPlan, samples: &[PhaseState]) -> GccCensus {
    let rule = BallRule { balls: plan.inner_balls.clone(), min_speed: HIT_SPEED, window: (plan.t_end / 9.0, 8.0 * plan.t_end / 9.0) };
    let light = plan.light_speed();
    let hits: Vec<Option<f64>> = samples
        .par_iter()
        .map(|s| {
            let mut p = *s;
            let after = free_flight(p, light, plan.config.idle);
            if let Some(f) = rule.chord(0.0, &p, &after) {
                return Some(f * plan.config.idle);
            }
            p = after;
            for (seg, fields) in plan.segments[1..].iter().zip(&plan.fields) {
                let force = ForceSpec::new(fields, light);
                let mut hit = None;
                rk4_through(&mut p, &force, seg.start, seg.end(), plan.config.step, |t, h, a, b| {
                    hit = rule.chord(t, a, b).map(|f| t + f * h);
                    hit.is_some()
                });
                if hit.is_some() {
                    return hit;
                }
            }
            None
        })
        .collect();
    let times: Vec<f64> = hits.iter().flatten().copied().collect();
    let misses = samples.iter().zip(&hits).filter(|(_, h)| h.is_none()).map(|(s, _)| *s).collect();
    GccCensus {
        total: samples.len(),
        hits: times.len(),
        hit_fraction: times.len() as f64 / samples.len().max(1) as f64,
        earliest_hit: times.iter().copied().fold(f64::INFINITY, f64::min),
        latest_hit: times.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        misses,
        rule,
    }
}

/// Free flights of fast particles during the idle segment that enter `ω′`.
pub fn idle_census(plan: &GccPlan) -> GccCensus {
    let cfg = &plan.config;
    let light = plan.light_speed();
    let rule = BallRule { balls: plan.inner_balls.clone(), min_speed: 0.0, window: (0.0, cfg.idle) };
    let samples: Vec<PhaseState> = cfg.fast_census.samples(cfg.fast_speed).into_iter().filter(|s| s.speed() > 0.0).collect();
    let hits: Vec<Option<f64>> = samples
        .par_iter()
        .map(|s| rule.chord(0.0, s, &free_flight(*s, light, cfg.idle)).map(|f| f * cfg.idle))
        .collect();
    let times: Vec<f64> = hits.iter().flatten().copied().collect();
    GccCensus {
        total: samples.len(),
        hits: times.len(),
        hit_fraction: times.len() as f64 / samples.len().max(1) as f64,
        earliest_hit: times.iter().copied().fold(f64::INFINITY, f64::min),
        latest_hit: times.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        misses: samples.iter().zip(&hits).filter(|(_, h)| h.is_none()).map(|(s, _)| *s).collect(),
        rule,
    }
}

/// Speed of a particle at rest after `t` under `E = (1, 0)`, by RK4.
pub fn standing_speed(c: f64, t: f64, step: f64) -> Result<f64> {
    let light = LightSpeed::new(c)?;
    let fields = SampledFields::single(VectorField::constant(rule_grid(), [1.0, 0.0]), ScalarField::zeros(rule_grid()));
    let force = ForceSpec::new(&fields, light);
    let mut p = PhaseState::new([0.5, 0.5], [0.0, 0.0]);
    rk4_through(&mut p, &force, 0.0, t, step, |_, _, _, _| false);
    Ok(p.speed())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standing_particle_reaches_hit_speed() {
        assert!(standing_speed(1.0, 3.9, 0.01).unwrap() < HIT_SPEED);
        assert!(standing_speed(1.0, 4.1, 0.01).unwrap() > HIT_SPEED);
        assert!(standing_speed(-1.0, 1.0, 0.01).is_err());
    }

    #[test]
    fn default_plan_steers_and_hits_everything() {
        let cfg = GccPlanConfig::default();
        let plan = assemble_reference_gcc(&cfg).unwrap();
        assert!(plan.up.relative_residual < cfg.max_residual);
        assert!(plan.segments[2].duration >= plan.hold_needed);
        let support = check_gcc_support(&plan, 8).unwrap();
        assert!(support.current_outside < 1e-12, "{support:?}");
        assert_eq!(support.endpoint_current, 0.0);
        assert!(support.charge < 1e-12 && support.current_recovery < 1e-10, "{support:?}");
        assert!(support.final_fields < 1e-6, "{support:?}");
        let census = gcc_census(&plan, &cfg.census.samples(cfg.speed_cap));
        assert_eq!(census.hits, census.total, "{:?}", census.misses);
        assert!(census.latest_hit <= 8.0 * plan.t_end / 9.0);
        let idle = idle_census(&plan);
        assert_eq!(idle.hits, idle.total);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(serde_json::from_str::<GccPlanConfig>(r#"{"bogus": 1}"#).is_err());
        let cfg = GccPlanConfig { erosion: 0.2, ..GccPlanConfig::default() };
        assert!(assemble_reference_gcc(&cfg).is_err());
    }
}
