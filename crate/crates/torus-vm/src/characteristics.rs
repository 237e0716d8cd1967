//! Relativistic and classical characteristics `X' = v̂(V)`, `V' = E + v̂⊥ b + F`.
//!
//! Positions are integrated unwrapped and reported both wrapped into
//! `[0,1)²` and unwrapped. The angle `θ` is measured clockwise from the
//! first axis, which is the sense a positive `b` turns velocities.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{wrap_unit, ScalarField, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LightSpeed {
    Finite(f64),
    Infinite,
}

impl LightSpeed {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_infinite() && c > 0.0 {
            Ok(Self::Infinite)
        } else if c > 0.0 && c.is_finite() {
            Ok(Self::Finite(c))
        } else {
            Err(Error::InvalidInput(format!("speed of light must be positive, got {c}")))
        }
    }

    /// `√(1 + |v|²/c²)`.
    pub fn lorentz(self, v: [f64; 2]) -> f64 {
        match self {
            Self::Infinite => 1.0,
            Self::Finite(c) => (1.0 + (v[0] * v[0] + v[1] * v[1]) / (c * c)).sqrt(),
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Self::Infinite => f64::INFINITY,
            Self::Finite(c) => c,
        }
    }

    pub fn scaled(self, s: f64) -> Self {
        match self {
            Self::Infinite => Self::Infinite,
            Self::Finite(c) => Self::Finite(c * s),
        }
    }
}

pub fn relativistic_velocity(v: [f64; 2], c: LightSpeed) -> [f64; 2] {
    let g = c.lorentz(v);
    [v[0] / g, v[1] / g]
}

#[inline]
pub fn perp(v: [f64; 2]) -> [f64; 2] {
    [v[1], -v[0]]
}

#[inline]
pub fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub x: [f64; 2],
    pub v: [f64; 2],
}

impl PhaseState {
    pub fn new(x: [f64; 2], v: [f64; 2]) -> Self {
        Self { x, v }
    }

    pub fn wrapped(&self) -> Self {
        Self { x: [wrap_unit(self.x[0]), wrap_unit(self.x[1])], v: self.v }
    }

    pub fn speed(&self) -> f64 {
        norm(self.v)
    }

    /// Clockwise angle of the velocity.
    pub fn theta(&self) -> f64 {
        -self.v[1].atan2(self.v[0])
    }
}

/// Electromagnetic field seen by particles: `(E(t,x), b(t,x))`.
pub trait FieldProvider {
    fn fields(&self, t: f64, x: [f64; 2]) -> ([f64; 2], f64);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantField {
    pub e: [f64; 2],
    pub b: f64,
}

impl FieldProvider for ConstantField {
    fn fields(&self, _t: f64, _x: [f64; 2]) -> ([f64; 2], f64) {
        (self.e, self.b)
    }
}

/// Closed-form field.
pub struct FnField<F>(pub F);

impl<F: Fn(f64, [f64; 2]) -> ([f64; 2], f64)> FieldProvider for FnField<F> {
    fn fields(&self, t: f64, x: [f64; 2]) -> ([f64; 2], f64) {
        (self.0)(t, x)
    }
}

/// Grid fields at uniform times, bicubic in space and linear in time.
#[derive(Debug, Clone)]
pub struct SampledFields {
    pub t0: f64,
    pub dt: f64,
    pub e: Vec<VectorField>,
    pub b: Vec<ScalarField>,
}

impl SampledFields {
    pub fn new(t0: f64, dt: f64, e: Vec<VectorField>, b: Vec<ScalarField>) -> Result<Self> {
        if e.is_empty() || e.len() != b.len() {
            return Err(Error::InvalidInput("need matching, nonempty E and b samples".into()));
        }
        if e.len() > 1 && !(dt > 0.0) {
            return Err(Error::InvalidInput("sample spacing must be positive".into()));
        }
        Ok(Self { t0, dt, e, b })
    }

    pub fn single(e: VectorField, b: ScalarField) -> Self {
        Self { t0: 0.0, dt: 1.0, e: vec![e], b: vec![b] }
    }
}

impl FieldProvider for SampledFields {
    fn fields(&self, t: f64, x: [f64; 2]) -> ([f64; 2], f64) {
        let last = self.e.len() - 1;
        if last == 0 {
            return (self.e[0].interpolate(x), self.b[0].interpolate(x));
        }
        let u = ((t - self.t0) / self.dt).clamp(0.0, last as f64);
        let s = (u.floor() as usize).min(last - 1);
        let w = u - s as f64;
        let e0 = self.e[s].interpolate(x);
        let e1 = self.e[s + 1].interpolate(x);
        let b0 = self.b[s].interpolate(x);
        let b1 = self.b[s + 1].interpolate(x);
        (
            [e0[0] + w * (e1[0] - e0[0]), e0[1] + w * (e1[1] - e0[1])],
            b0 + w * (b1 - b0),
        )
    }
}

/// Sum of two providers.
pub struct SumField<'a>(pub &'a dyn FieldProvider, pub &'a dyn FieldProvider);

impl FieldProvider for SumField<'_> {
    fn fields(&self, t: f64, x: [f64; 2]) -> ([f64; 2], f64) {
        let (e0, b0) = self.0.fields(t, x);
        let (e1, b1) = self.1.fields(t, x);
        ([e0[0] + e1[0], e0[1] + e1[1]], b0 + b1)
    }
}

pub type ExtraForce<'a> = &'a dyn Fn(f64, [f64; 2], [f64; 2]) -> [f64; 2];

/// Everything needed to evaluate the right-hand side.
#[derive(Clone, Copy)]
pub struct ForceSpec<'a> {
    pub fields: &'a dyn FieldProvider,
    pub c: LightSpeed,
    pub extra: Option<ExtraForce<'a>>,
    /// Sup norm of `extra`, as known to the caller.
    pub extra_bound: f64,
}

impl<'a> ForceSpec<'a> {
    pub fn new(fields: &'a dyn FieldProvider, c: LightSpeed) -> Self {
        Self { fields, c, extra: None, extra_bound: 0.0 }
    }

    pub fn with_extra(self, extra: ExtraForce<'a>, bound: f64) -> Self {
        Self { extra: Some(extra), extra_bound: bound, ..self }
    }

    /// `(v̂, dV/dt)` at `(t, x, v)`.
    pub fn rhs(&self, t: f64, x: [f64; 2], v: [f64; 2]) -> ([f64; 2], [f64; 2]) {
        let vh = relativistic_velocity(v, self.c);
        let (e, b) = self.fields.fields(t, x);
        let mut a = [e[0] + vh[1] * b, e[1] - vh[0] * b];
        if let Some(f) = self.extra {
            let g = f(t, x, v);
            a[0] += g[0];
            a[1] += g[1];
        }
        (vh, a)
    }

    /// Non-magnetic part of the force `E + F`, used by the angle and speed rates.
    pub fn non_magnetic(&self, t: f64, x: [f64; 2], v: [f64; 2]) -> ([f64; 2], f64) {
        let (e, b) = self.fields.fields(t, x);
        let g = self.extra.map_or([0.0, 0.0], |f| f(t, x, v));
        ([e[0] + g[0], e[1] + g[1]], b)
    }
}

/// One classical RK4 step on unwrapped coordinates.
pub fn rk4_step(state: PhaseState, t: f64, h: f64, force: &ForceSpec) -> PhaseState {
    let add = |a: [f64; 2], s: f64, b: [f64; 2]| [a[0] + s * b[0], a[1] + s * b[1]];
    let (k1x, k1v) = force.rhs(t, state.x, state.v);
    let (k2x, k2v) = force.rhs(t + h / 2.0, add(state.x, h / 2.0, k1x), add(state.v, h / 2.0, k1v));
    let (k3x, k3v) = force.rhs(t + h / 2.0, add(state.x, h / 2.0, k2x), add(state.v, h / 2.0, k2v));
    let (k4x, k4v) = force.rhs(t + h, add(state.x, h, k3x), add(state.v, h, k3v));
    let comb = |a: [f64; 2], k1: [f64; 2], k2: [f64; 2], k3: [f64; 2], k4: [f64; 2]| {
        [
            a[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            a[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ]
    };
    PhaseState { x: comb(state.x, k1x, k2x, k3x, k4x), v: comb(state.v, k1v, k2v, k3v, k4v) }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trajectory {
    pub t: Vec<f64>,
    /// Unwrapped positions and velocities.
    pub states: Vec<PhaseState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn last(&self) -> PhaseState {
        *self.states.last().expect("trajectory has the initial point")
    }

    pub fn wrapped(&self, i: usize) -> PhaseState {
        self.states[i].wrapped()
    }

    /// CSV with columns `t,x1,x2,v1,v2,|v|,theta`; positions wrapped.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "t,x1,x2,v1,v2,speed,theta")?;
        for (t, s) in self.t.iter().zip(&self.states) {
            let p = s.wrapped();
            writeln!(w, "{t},{},{},{},{},{},{}", p.x[0], p.x[1], p.v[0], p.v[1], s.speed(), s.theta())?;
        }
        Ok(())
    }
}

/// Number of equal steps of length close to `dt` covering `[t0, t1]`.
pub fn step_count(t0: f64, t1: f64, dt: f64) -> usize {
    (((t1 - t0) / dt) - 1e-9).ceil().max(1.0) as usize
}

/// Fixed-step RK4 from `t0` to `t1`; the step is shortened so it divides the interval.
pub fn integrate(start: PhaseState, force: &ForceSpec, t0: f64, t1: f64, dt: f64) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("time step must be positive".into()));
    }
    let steps = step_count(t0, t1, dt);
    let h = (t1 - t0) / steps as f64;
    let mut traj = Trajectory { t: Vec::with_capacity(steps + 1), states: Vec::with_capacity(steps + 1) };
    let mut s = start;
    traj.t.push(t0);
    traj.states.push(s);
    for q in 0..steps {
        let t = t0 + q as f64 * h;
        s = rk4_step(s, t, h, force);
        if !(s.x.iter().chain(&s.v).all(|c| c.is_finite())) {
            return Err(Error::NonFinite("characteristic"));
        }
        traj.t.push(t0 + (q + 1) as f64 * h);
        traj.states.push(s);
    }
    Ok(traj)
}

/// Final state only.
pub fn flow(start: PhaseState, force: &ForceSpec, t0: f64, t1: f64, dt: f64) -> Result<PhaseState> {
    let steps = step_count(t0, t1, dt);
    let h = (t1 - t0) / steps as f64;
    let mut s = start;
    for q in 0..steps {
        s = rk4_step(s, t0 + q as f64 * h, h, force);
    }
    if s.x.iter().chain(&s.v).all(|c| c.is_finite()) {
        Ok(s)
    } else {
        Err(Error::NonFinite("characteristic"))
    }
}

/// Rate of the clockwise velocity angle, `b/γ − (V × F)/|V|²`, where `F` is
/// the non-magnetic force.
pub fn angle_rate(state: PhaseState, b: f64, c: LightSpeed, other: [f64; 2]) -> Result<f64> {
    let v = state.v;
    let s2 = v[0] * v[0] + v[1] * v[1];
    if s2 == 0.0 {
        return Err(Error::InvalidInput("angle undefined at zero velocity".into()));
    }
    Ok(b / c.lorentz(v) - (v[0] * other[1] - v[1] * other[0]) / s2)
}

/// Rate of `|V|`: the magnetic force does no work.
pub fn speed_rate(state: PhaseState, other: [f64; 2]) -> Result<f64> {
    let s = state.speed();
    if s == 0.0 {
        return Err(Error::InvalidInput("speed rate undefined at zero velocity".into()));
    }
    Ok((state.v[0] * other[0] + state.v[1] * other[1]) / s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GronwallRow {
    pub t: f64,
    pub dv: f64,
    pub dx: f64,
    pub bound_v: f64,
    pub bound_x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GronwallReport {
    pub rows: Vec<GronwallRow>,
    pub violations: usize,
}

/// Compares flows with and without the extra force in `force` against the
/// estimate `‖F‖ exp(‖b‖_{W¹'∞}(1 + 2|v|) t)`.
pub fn gronwall_compare(start: PhaseState, force: &ForceSpec, b_w1inf: f64, t_end: f64, dt: f64) -> Result<GronwallReport> {
    let bare = ForceSpec { extra: None, extra_bound: 0.0, ..*force };
    let a = integrate(start, force, 0.0, t_end, dt)?;
    let b = integrate(start, &bare, 0.0, t_end, dt)?;
    let rate = b_w1inf * (1.0 + 2.0 * start.speed());
    let rows: Vec<GronwallRow> = a
        .t
        .iter()
        .zip(a.states.iter().zip(&b.states))
        .map(|(&t, (p, q))| {
            let bound_v = force.extra_bound * (rate * t).exp();
            GronwallRow {
                t,
                dv: norm([p.v[0] - q.v[0], p.v[1] - q.v[1]]),
                dx: norm([p.x[0] - q.x[0], p.x[1] - q.x[1]]),
                bound_v,
                bound_x: t * bound_v,
            }
        })
        .collect();
    let violations = rows.iter().filter(|r| r.dv > r.bound_v || r.dx > r.bound_x).count();
    Ok(GronwallReport { rows, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::GridSpec;
    use std::f64::consts::PI;

    const ZERO_FIELD: ConstantField = ConstantField { e: [0.0, 0.0], b: 0.0 };

    #[test]
    fn relativistic_velocity_values() {
        assert_eq!(relativistic_velocity([0.0, 0.0], LightSpeed::Finite(1.0)), [0.0, 0.0]);
        let v = relativistic_velocity([1.0, 0.0], LightSpeed::Finite(1.0));
        assert!((v[0] - 0.5f64.sqrt()).abs() < 1e-15 && v[1] == 0.0);
        let v = relativistic_velocity([3.0, 4.0], LightSpeed::Finite(1e9));
        assert!((v[0] - 3.0).abs() < 3e-15 && (v[1] - 4.0).abs() < 4e-15);
        assert_eq!(relativistic_velocity([3.0, 4.0], LightSpeed::Infinite), [3.0, 4.0]);
        assert!(LightSpeed::new(0.0).is_err());
        assert_eq!(LightSpeed::new(f64::INFINITY).unwrap(), LightSpeed::Infinite);
    }

    #[test]
    fn free_transport() {
        let force = ForceSpec::new(&ZERO_FIELD, LightSpeed::Finite(2.0));
        let start = PhaseState::new([0.9, 0.1], [1.5, -0.5]);
        let traj = integrate(start, &force, 0.0, 3.0, 0.01).unwrap();
        let vh = relativistic_velocity(start.v, force.c);
        let end = traj.wrapped(traj.len() - 1);
        let want = [wrap_unit(0.9 + 3.0 * vh[0]), wrap_unit(0.1 + 3.0 * vh[1])];
        assert!((end.x[0] - want[0]).abs() < 1e-12 && (end.x[1] - want[1]).abs() < 1e-12);
        assert!(end.x.iter().all(|c| (0.0..1.0).contains(c)));
    }

    fn gyro_radius(c: LightSpeed) -> (f64, f64) {
        let b = 2.0;
        let field = ConstantField { e: [0.0, 0.0], b };
        let force = ForceSpec::new(&field, c);
        let v = [1.5, 0.0];
        let start = PhaseState::new([0.0, 0.0], v);
        let period = 2.0 * PI * c.lorentz(v) / b;
        let traj = integrate(start, &force, 0.0, period, period / 2000.0).unwrap();
        // clockwise turn: centre sits at x + v⊥/b
        let centre = [v[1] / b, -v[0] / b];
        let radii: Vec<f64> = traj.states.iter().map(|s| norm([s.x[0] - centre[0], s.x[1] - centre[1]])).collect();
        let worst = radii.iter().map(|r| (r - 1.5 / b).abs()).fold(0.0, f64::max);
        let speed = traj.states.iter().map(|s| (s.speed() - 1.5).abs()).fold(0.0, f64::max);
        (worst / (1.5 / b), speed)
    }

    #[test]
    fn gyroradius_independent_of_c() {
        for c in [LightSpeed::Finite(1.0), LightSpeed::Finite(10.0), LightSpeed::Infinite] {
            let (rel, speed) = gyro_radius(c);
            assert!(rel < 1e-3, "{c:?}: {rel}");
            assert!(speed < 1e-10);
        }
    }

    #[test]
    fn speed_invariant_in_varying_magnetic_field() {
        let field = FnField(|_t: f64, x: [f64; 2]| ([0.0, 0.0], 1.0 + 0.5 * (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos()));
        let force = ForceSpec::new(&field, LightSpeed::Finite(3.0));
        let start = PhaseState::new([0.3, 0.7], [2.0, 1.0]);
        let traj = integrate(start, &force, 0.0, 5.0, 1e-3).unwrap();
        let drift = traj.states.iter().map(|s| (s.speed() - start.speed()).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-9 * start.speed() * 5.0, "{drift}");
    }

    #[test]
    fn angle_rate_values() {
        let s = PhaseState::new([0.0, 0.0], [0.3, -0.4]);
        assert!((angle_rate(s, 1.0, LightSpeed::Infinite, [0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        let s = PhaseState::new([0.0, 0.0], [1.0, 0.0]);
        assert!((angle_rate(s, 2.0, LightSpeed::Finite(1.0), [0.0, 0.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(angle_rate(PhaseState::new([0.0; 2], [0.0; 2]), 1.0, LightSpeed::Infinite, [0.0; 2]).is_err());
    }

    #[test]
    fn angle_and_speed_rates_match_finite_differences() {
        let field = FnField(|_t: f64, x: [f64; 2]| ([0.2 * (2.0 * PI * x[1]).cos(), 0.1], 1.0 + 0.3 * (2.0 * PI * x[0]).sin()));
        let extra = |_t: f64, _x: [f64; 2], v: [f64; 2]| [0.05 * v[1], 0.02];
        let force = ForceSpec::new(&field, LightSpeed::Finite(2.0)).with_extra(&extra, 0.1);
        let start = PhaseState::new([0.1, 0.2], [1.0, 0.5]);
        let h = 1e-4;
        let traj = integrate(start, &force, 0.0, 1.0, h).unwrap();
        for i in (100..traj.len() - 1).step_by(1000) {
            let (p, q) = (traj.states[i - 1], traj.states[i + 1]);
            let mut dth = q.theta() - p.theta();
            dth -= (dth / (2.0 * PI)).round() * 2.0 * PI;
            let fd = dth / (2.0 * h);
            let s = traj.states[i];
            let (other, b) = force.non_magnetic(traj.t[i], s.x, s.v);
            let rate = angle_rate(s, b, force.c, other).unwrap();
            assert!((fd - rate).abs() < 1e-6 * rate.abs(), "{fd} {rate}");
            let fd_speed = (q.speed() - p.speed()) / (2.0 * h);
            let sr = speed_rate(s, other).unwrap();
            assert!((fd_speed - sr).abs() < 1e-6 * (1.0 + sr.abs()));
        }
    }

    #[test]
    fn semigroup_property() {
        let field = FnField(|t: f64, x: [f64; 2]| ([0.1 * t.cos(), 0.0], 1.0 + 0.2 * (2.0 * PI * x[1]).sin()));
        let force = ForceSpec::new(&field, LightSpeed::Finite(5.0));
        let s0 = PhaseState::new([0.5, 0.5], [1.0, 1.0]);
        let direct = flow(s0, &force, 0.0, 2.0, 1e-3).unwrap();
        let mid = flow(s0, &force, 0.0, 0.7, 1e-3).unwrap();
        let split = flow(mid, &force, 0.7, 2.0, 1e-3).unwrap();
        let d = norm([direct.x[0] - split.x[0], direct.x[1] - split.x[1]]) + norm([direct.v[0] - split.v[0], direct.v[1] - split.v[1]]);
        assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn fourth_order_convergence() {
        let field = FnField(|_t: f64, x: [f64; 2]| ([0.3 * (2.0 * PI * x[1]).sin(), 0.0], 2.0 + (2.0 * PI * x[0]).cos()));
        let force = ForceSpec::new(&field, LightSpeed::Finite(2.0));
        let s0 = PhaseState::new([0.2, 0.4], [1.0, -1.0]);
        let h = 0.02;
        let reference = flow(s0, &force, 0.0, 2.0, h / 8.0).unwrap();
        let err = |h: f64| {
            let s = flow(s0, &force, 0.0, 2.0, h).unwrap();
            norm([s.x[0] - reference.x[0], s.x[1] - reference.x[1]]) + norm([s.v[0] - reference.v[0], s.v[1] - reference.v[1]])
        };
        let ratio = err(h) / err(h / 2.0);
        assert!((ratio - 16.0).abs() < 0.3 * 16.0, "{ratio}");
    }

    #[test]
    fn classical_limit_rate() {
        let field = FnField(|_t: f64, x: [f64; 2]| ([0.0, 0.0], 1.0 + 0.5 * (2.0 * PI * x[0]).sin()));
        let s0 = PhaseState::new([0.2, 0.4], [1.0, 0.5]);
        let classical = flow(s0, &ForceSpec::new(&field, LightSpeed::Infinite), 0.0, 2.0, 1e-3).unwrap();
        let dev = |c: f64| {
            let s = flow(s0, &ForceSpec::new(&field, LightSpeed::Finite(c)), 0.0, 2.0, 1e-3).unwrap();
            norm([s.x[0] - classical.x[0], s.x[1] - classical.x[1]])
        };
        let ratio = dev(10.0) / dev(100.0);
        assert!((ratio / 100.0 - 1.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn gronwall_bound_holds() {
        let field = ConstantField { e: [0.0, 0.0], b: 1.0 };
        let extra = |t: f64, _x: [f64; 2], _v: [f64; 2]| [1e-4 * t.cos(), 1e-4 * t.sin()];
        let force = ForceSpec::new(&field, LightSpeed::Finite(4.0)).with_extra(&extra, 1e-4);
        let report = gronwall_compare(PhaseState::new([0.1, 0.1], [2.0, 0.0]), &force, 1.0, 1.0, 1e-3).unwrap();
        assert_eq!(report.violations, 0);
        assert_eq!(report.rows[0].dv, 0.0);
        assert!((report.rows[0].bound_v - 1e-4).abs() < 1e-18);
        let bare = ForceSpec::new(&field, LightSpeed::Finite(4.0));
        let report = gronwall_compare(PhaseState::new([0.1, 0.1], [2.0, 0.0]), &bare, 1.0, 1.0, 1e-2).unwrap();
        assert!(report.rows.iter().all(|r| r.dv == 0.0 && r.dx == 0.0));
    }

    #[test]
    fn sampled_fields_interpolate_in_time() {
        let g = GridSpec::new(16, 4).unwrap();
        let e0 = VectorField::constant(g, [1.0, 0.0]);
        let e1 = VectorField::constant(g, [3.0, 0.0]);
        let b = ScalarField::constant(g, 1.0);
        let f = SampledFields::new(0.0, 0.5, vec![e0, e1], vec![b.clone(), b]).unwrap();
        let (e, bb) = f.fields(0.25, [0.3, 0.3]);
        assert!((e[0] - 2.0).abs() < 1e-14 && (bb - 1.0).abs() < 1e-14);
        assert!((f.fields(7.0, [0.0, 0.0]).0[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn csv_columns() {
        let force = ForceSpec::new(&ZERO_FIELD, LightSpeed::Infinite);
        let traj = integrate(PhaseState::new([0.0, 0.0], [1.0, 0.0]), &force, 0.0, 0.1, 0.05).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x1,x2,v1,v2,speed,theta\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
