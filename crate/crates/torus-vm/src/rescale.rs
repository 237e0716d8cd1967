//! Changes of scale `f^λ(t,x,v) = f(λt, x, v/λ)`, `E^λ = λ²E(λt)`,
//! `B^λ = λ²B(λt)` with light speed `cλ`, and a small self-consistent
//! particle solver to test them on.
//!
//! A negative `λ` is stored with the positive light speed `|λ|c` and the
//! magnetic field flipped, which is the same system. Rescaled trajectories
//! are re-indexed so that their frames run forward in time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::absorption::{deposit_particles, gather, sample_datum, Particle};
use crate::characteristics::{rk4_step, FieldProvider, ForceSpec, LightSpeed};
use crate::error::{Error, Result};
use crate::maxwell::{evolve_spectral, poisson_spectral, SpectralSources, SpectralState};
use crate::spectral::{
    curl_scal, curl_vec, to_real, to_real_vector, to_spectral, to_spectral_vector, GridSpec, ScalarField, SpectralScalar,
    SpectralVector, VectorField,
};

/// Particles and fields at one time; `b` is the magnetic field itself.
#[derive(Debug, Clone, PartialEq)]
pub struct VmState {
    pub t: f64,
    pub particles: Vec<Particle>,
    pub e: VectorField,
    pub b: ScalarField,
}

impl VmState {
    pub fn grid(&self) -> GridSpec {
        self.e.grid()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmTrajectory {
    pub c: f64,
    pub dt: f64,
    pub frames: Vec<VmState>,
}

impl VmTrajectory {
    pub fn last(&self) -> &VmState {
        self.frames.last().expect("trajectory has an initial frame")
    }
}

/// Fields frozen over one particle step, gathered bilinearly.
struct FrozenField {
    e: VectorField,
    b_over_c: ScalarField,
}

impl FieldProvider for FrozenField {
    fn fields(&self, _t: f64, x: [f64; 2]) -> ([f64; 2], f64) {
        let grid = self.e.grid();
        (
            [gather(self.e.component_values(0), grid, x), gather(self.e.component_values(1), grid, x)],
            gather(self.b_over_c.values(), grid, x),
        )
    }
}

fn spectral_moments(particles: &[Particle], grid: GridSpec, c: LightSpeed) -> Result<(SpectralScalar, SpectralVector)> {
    let m = deposit_particles(particles, grid, c);
    Ok((to_spectral(&m.rho)?, to_spectral_vector(&m.j)?))
}

/// Exact Maxwell evolution over `h` with the sources held constant.
fn maxwell_step(state: &SpectralState, c: f64, rho: &SpectralScalar, j: &SpectralVector, h: f64) -> Result<SpectralState> {
    let src = SpectralSources::new(state.t, h, vec![rho.clone(), rho.clone()], vec![j.clone(), j.clone()])?;
    evolve_spectral(state, c, &src, state.t + h, |_| {})
}

fn frame(t: f64, particles: &[Particle], s: &SpectralState) -> VmState {
    VmState { t, particles: particles.to_vec(), e: to_real_vector(&s.e), b: to_real(&s.b) }
}

/// Split steps: half a Maxwell step with `j(Pₙ)`, an RK4 particle step in
/// the frozen mid fields, half a Maxwell step with `j(Pₙ₊₁)`.
pub fn solve_trajectory(initial: &VmState, c: f64, dt: f64, steps: usize) -> Result<VmTrajectory> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
    }
    let light = LightSpeed::new(c)?;
    if light == LightSpeed::Infinite {
        return Err(Error::InvalidInput("the field solver needs a finite light speed".into()));
    }
    let grid = initial.grid();
    if initial.b.grid() != grid {
        return Err(Error::GridMismatch);
    }
    let t0 = initial.t;
    let mut spec = SpectralState { t: t0, e: to_spectral_vector(&initial.e)?, b: to_spectral(&initial.b)? };
    let mut particles = initial.particles.clone();
    let (mut rho, mut j) = spectral_moments(&particles, grid, light)?;
    let mut frames = Vec::with_capacity(steps + 1);
    frames.push(frame(t0, &particles, &spec));
    for n in 0..steps {
        let t = t0 + n as f64 * dt;
        let mid = maxwell_step(&spec, c, &rho, &j, 0.5 * dt)?;
        let field = FrozenField { e: to_real_vector(&mid.e), b_over_c: to_real(&mid.b).scaled(1.0 / c) };
        particles.par_iter_mut().for_each(|p| {
            let force = ForceSpec::new(&field, light);
            let s = rk4_step(p.state(), t, dt, &force);
            p.x = s.x;
            p.v = s.v;
        });
        if particles.iter().any(|p| !(p.x.iter().chain(&p.v).all(|a| a.is_finite()))) {
            return Err(Error::NonFinite("particle trajectory".into()));
        }
        (rho, j) = spectral_moments(&particles, grid, light)?;
        spec = maxwell_step(&mid, c, &rho, &j, 0.5 * dt)?;
        spec.t = t0 + (n + 1) as f64 * dt;
        frames.push(frame(spec.t, &particles, &spec));
    }
    Ok(VmTrajectory { c, dt, frames })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda == 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("scale factor must be finite and nonzero, got {lambda}")));
    }
    Ok(())
}

/// One state under the change of scale; the time stamp is `t/|λ|`.
pub fn rescale_state(s: &VmState, lambda: f64) -> Result<VmState> {
    check_lambda(lambda)?;
    let l2 = lambda * lambda;
    Ok(VmState {
        t: s.t / lambda.abs(),
        particles: s.particles.iter().map(|p| Particle { x: p.x, v: [lambda * p.v[0], lambda * p.v[1]], w: l2 * p.w }).collect(),
        e: s.e.scaled(l2),
        b: s.b.scaled(l2 * lambda.signum()),
    })
}

/// Whole trajectory at light speed `|λ|c` and step `dt/|λ|`.
pub fn rescale_solution(traj: &VmTrajectory, lambda: f64) -> Result<VmTrajectory> {
    check_lambda(lambda)?;
    let mut frames = traj.frames.iter().map(|s| rescale_state(s, lambda)).collect::<Result<Vec<_>>>()?;
    let dt = traj.dt / lambda.abs();
    if lambda < 0.0 {
        frames.reverse();
        let t0 = traj.frames.first().map_or(0.0, |f| f.t) / lambda.abs();
        for (n, f) in frames.iter_mut().enumerate() {
            f.t = t0 + n as f64 * dt;
        }
    }
    Ok(VmTrajectory { c: traj.c * lambda.abs(), dt, frames })
}

/// Centered-difference defects of the four equations on interior frames,
/// each relative to the sup of its right-hand side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryResidual {
    pub position: f64,
    pub velocity: f64,
    pub electric: f64,
    pub magnetic: f64,
}

impl TrajectoryResidual {
    pub fn max(&self) -> f64 {
        self.position.max(self.velocity).max(self.electric).max(self.magnetic)
    }
}

#[derive(Default)]
struct Defect {
    diff: f64,
    scale: f64,
}

impl Defect {
    fn add(&mut self, lhs: f64, rhs: f64) {
        self.diff = self.diff.max((lhs - rhs).abs());
        self.scale = self.scale.max(rhs.abs());
    }

    fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.diff / self.scale
        } else {
            self.diff
        }
    }
}

pub fn residual(traj: &VmTrajectory) -> Result<TrajectoryResidual> {
    if traj.frames.len() < 3 {
        return Err(Error::InvalidInput("residual needs at least three frames".into()));
    }
    let c = traj.c;
    let light = LightSpeed::new(c)?;
    let grid = traj.frames[0].grid();
    let h2 = 2.0 * traj.dt;
    let (mut dx, mut dv, mut de, mut db) = (Defect::default(), Defect::default(), Defect::default(), Defect::default());
    for w in traj.frames.windows(3) {
        let (a, s, b) = (&w[0], &w[1], &w[2]);
        let field = FrozenField { e: s.e.clone(), b_over_c: s.b.scaled(1.0 / c) };
        let force = ForceSpec::new(&field, light);
        for ((pa, ps), pb) in a.particles.iter().zip(&s.particles).zip(&b.particles) {
            let (vh, acc) = force.rhs(s.t, ps.x, ps.v);
            for i in 0..2 {
                dx.add((pb.x[i] - pa.x[i]) / h2, vh[i]);
                dv.add((pb.v[i] - pa.v[i]) / h2, acc[i]);
            }
        }
        let (_, j) = spectral_moments(&s.particles, grid, light)?;
        let e_rhs = to_real_vector(&curl_scal(&to_spectral(&s.b)?).scaled(c).axpy(-1.0, &j)?);
        let b_rhs = to_real(&curl_vec(&to_spectral_vector(&s.e)?).scaled(-c));
        for i in 0..2 {
            let (ea, eb, r) = (a.e.component_values(i), b.e.component_values(i), e_rhs.component_values(i));
            for k in 0..grid.node_count() {
                de.add((eb[k] - ea[k]) / h2, r[k]);
            }
        }
        for k in 0..grid.node_count() {
            db.add((b.b.values()[k] - a.b.values()[k]) / h2, b_rhs.values()[k]);
        }
    }
    Ok(TrajectoryResidual { position: dx.relative(), velocity: dv.relative(), electric: de.relative(), magnetic: db.relative() })
}

/// Residual of the rescaled system at light speed `cλ`.
pub fn residual_rescaled(traj: &VmTrajectory, lambda: f64) -> Result<TrajectoryResidual> {
    residual(&rescale_solution(traj, lambda)?)
}

/// Largest relative difference: positions absolutely, velocities and
/// fields against the sup of `a`.
pub fn state_distance(a: &VmState, b: &VmState) -> Result<f64> {
    if a.particles.len() != b.particles.len() {
        return Err(Error::InvalidInput("states carry different particle counts".into()));
    }
    let rel = |d: f64, s: f64| if s > 0.0 { d / s } else { d };
    let mut dx: f64 = 0.0;
    let (mut dv, mut vs): (f64, f64) = (0.0, 0.0);
    for (p, q) in a.particles.iter().zip(&b.particles) {
        for i in 0..2 {
            dx = dx.max((p.x[i] - q.x[i]).abs());
            dv = dv.max((p.v[i] - q.v[i]).abs());
            vs = vs.max(p.v[i].abs());
        }
    }
    let de = rel(a.e.max_abs_diff(&b.e)?, a.e.sup_norm());
    let db = rel(a.b.max_abs_diff(&b.b)?, a.b.sup_norm());
    Ok(dx.max(rel(dv, vs)).max(de).max(db))
}

pub fn trajectory_distance(a: &VmTrajectory, b: &VmTrajectory) -> Result<f64> {
    if a.frames.len() != b.frames.len() {
        return Err(Error::InvalidInput("trajectories have different frame counts".into()));
    }
    a.frames.iter().zip(&b.frames).try_fold(0.0f64, |m, (x, y)| Ok(m.max(state_distance(x, y)?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub grid_n: usize,
    pub k_max: usize,
    pub c: f64,
    pub dt: f64,
    pub steps: usize,
    pub particles: usize,
    pub seed: u64,
    /// Total charge of the sampled ensemble.
    pub kappa: f64,
    /// Velocity support radius of the sampled ensemble.
    pub speed: f64,
    /// Amplitude of the initial magnetic field `m(1 + cos(2πx₂)/2)`.
    pub magnetic: f64,
    /// Factor of the rescaled-residual check.
    pub lambda: f64,
    /// Factor of the solve-at-`cμ`-and-transform-back pipeline.
    pub pipeline_lambda: f64,
    /// Agreement required of the pipeline.
    pub pipeline_tol: f64,
    /// Allowed ratio of rescaled to original residual.
    pub residual_factor: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            grid_n: 16,
            k_max: 7,
            c: 1.0,
            dt: 0.01,
            steps: 100,
            particles: 256,
            seed: 5,
            kappa: 1.0,
            speed: 1.0,
            magnetic: 0.3,
            lambda: 2.0,
            pipeline_lambda: 3.0,
            pipeline_tol: 1e-9,
            residual_factor: 4.0,
        }
    }
}

/// Sampled ensemble with `E₀` from the Poisson equation and a smooth `B₀`.
pub fn initial_state(cfg: &ScalingConfig) -> Result<VmState> {
    let grid = GridSpec::new(cfg.grid_n, cfg.k_max)?;
    let light = LightSpeed::new(cfg.c)?;
    let particles = sample_datum(cfg.particles, cfg.kappa, cfg.speed, cfg.seed).particles;
    let rho = deposit_particles(&particles, grid, light).rho;
    let e = to_real_vector(&poisson_spectral(&to_spectral(&rho)?));
    let m = cfg.magnetic;
    let b = to_real(&to_spectral(&ScalarField::from_fn(grid, |x| m * (1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[1]).cos())))?);
    Ok(VmState { t: 0.0, particles, e, b })
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub identity_error: f64,
    pub base_residual: TrajectoryResidual,
    /// Step-doubling estimate of the solver error at `T`.
    pub solver_tolerance: f64,
    pub reversed_residual: TrajectoryResidual,
    /// Distance between the reversed solve from the final state and the
    /// reversed original trajectory at its end.
    pub reversal_error: f64,
    pub reversal_ok: bool,
    pub lambda: f64,
    pub rescaled_residual: TrajectoryResidual,
    pub residual_ratio: f64,
    /// `sup|E^λ(0)| / sup|E(0)|`.
    pub initial_field_ratio: f64,
    pub rescaled_ok: bool,
    pub pipeline_lambda: f64,
    pub pipeline_error: f64,
    pub pipeline_ok: bool,
}

impl ScalingReport {
    pub fn pass(&self) -> bool {
        self.identity_error == 0.0 && self.reversal_ok && self.rescaled_ok && self.pipeline_ok
    }
}

pub fn scaling_check(cfg: &ScalingConfig) -> Result<ScalingReport> {
    check_lambda(cfg.lambda)?;
    check_lambda(cfg.pipeline_lambda)?;
    if cfg.steps < 2 {
        return Err(Error::InvalidInput("need at least two steps".into()));
    }
    let init = initial_state(cfg)?;
    let base = solve_trajectory(&init, cfg.c, cfg.dt, cfg.steps)?;
    let identity_error = trajectory_distance(&base, &rescale_solution(&base, 1.0)?)?;
    let base_residual = residual(&base)?;

    let fine = solve_trajectory(&init, cfg.c, 0.5 * cfg.dt, 2 * cfg.steps)?;
    let solver_tolerance = state_distance(base.last(), fine.last())?;
    let reversed = rescale_solution(&base, -1.0)?;
    let reversed_residual = residual(&reversed)?;
    let back = solve_trajectory(&reversed.frames[0], cfg.c, cfg.dt, cfg.steps)?;
    let reversal_error = state_distance(reversed.last(), back.last())?;

    let scaled = rescale_solution(&base, cfg.lambda)?;
    let rescaled_residual = residual(&scaled)?;
    let residual_ratio = rescaled_residual.max() / base_residual.max();
    let initial_field_ratio = scaled.frames[0].e.sup_norm() / base.frames[0].e.sup_norm();
    let l2 = cfg.lambda * cfg.lambda;
    let rescaled_ok = residual_ratio <= cfg.residual_factor && (initial_field_ratio - l2).abs() <= 1e-12 * l2;

    let mu = cfg.pipeline_lambda;
    let data = rescale_state(&init, mu)?;
    let solved = solve_trajectory(&data, cfg.c * mu.abs(), cfg.dt / mu.abs(), cfg.steps)?;
    let pipeline_error = trajectory_distance(&base, &rescale_solution(&solved, 1.0 / mu)?)?;

    Ok(ScalingReport {
        identity_error,
        base_residual,
        solver_tolerance,
        reversed_residual,
        reversal_error,
        reversal_ok: reversal_error <= solver_tolerance,
        lambda: cfg.lambda,
        rescaled_residual,
        residual_ratio,
        initial_field_ratio,
        rescaled_ok,
        pipeline_lambda: mu,
        pipeline_error,
        pipeline_ok: pipeline_error <= cfg.pipeline_tol,
    })
}
