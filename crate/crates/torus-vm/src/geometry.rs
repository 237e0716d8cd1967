//! Control sets on the torus, the geometric control condition, bad
//! directions of a ball, and certification of the magnetic bending condition.
//!
//! Every geometric statement here is certified at a finite resolution that is
//! reported alongside the result.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::characteristics::{norm, rk4_step, FieldProvider, ForceSpec, LightSpeed, PhaseState};
use crate::error::{Error, Result};
use crate::spectral::{torus_distance, wrap_delta, wrap_unit, GridSpec, ScalarField};

pub fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Ball {
    pub fn new(center: [f64; 2], radius: f64) -> Self {
        Self { center, radius }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSet {
    Whole,
    /// Band around the closed geodesic of direction `(p, q)` through `offset`.
    Strip { direction: [i64; 2], offset: [f64; 2], half_width: f64 },
    BallUnion { balls: Vec<Ball> },
    /// Node mask with a precomputed signed distance to the mask boundary.
    GridMask {
        n: usize,
        mask: Vec<bool>,
        #[serde(skip)]
        margin: Vec<f64>,
    },
}

impl ControlSet {
    pub fn strip(direction: [i64; 2], offset: [f64; 2], half_width: f64) -> Result<Self> {
        if gcd(direction[0], direction[1]) != 1 {
            return Err(Error::InvalidInput(format!("strip direction {direction:?} is not a coprime pair")));
        }
        if !(half_width > 0.0) {
            return Err(Error::InvalidInput("strip half-width must be positive".into()));
        }
        Ok(Self::Strip { direction, offset, half_width })
    }

    pub fn balls(balls: Vec<Ball>) -> Result<Self> {
        if balls.is_empty() || balls.iter().any(|b| !(b.radius > 0.0)) {
            return Err(Error::InvalidInput("ball union needs balls of positive radius".into()));
        }
        Ok(Self::BallUnion { balls })
    }

    pub fn from_mask(n: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != n * n {
            return Err(Error::InvalidInput("mask size does not match grid".into()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidInput("mask is empty".into()));
        }
        let margin = signed_margin(n, &mask);
        Ok(Self::GridMask { n, mask, margin })
    }

    pub fn from_mask_fn(grid: GridSpec, f: impl Fn([f64; 2]) -> bool) -> Result<Self> {
        Self::from_mask(grid.n(), grid.nodes().map(|(_, x)| f(x)).collect())
    }

    /// Distance from `x` to the boundary, positive inside.
    pub fn margin(&self, x: [f64; 2]) -> f64 {
        match self {
            Self::Whole => f64::INFINITY,
            Self::Strip { direction, offset, half_width } => half_width - strip_distance(*direction, *offset, x),
            Self::BallUnion { balls } => {
                balls.iter().map(|b| b.radius - torus_distance(x, b.center)).fold(f64::NEG_INFINITY, f64::max)
            }
            Self::GridMask { n, margin, .. } => {
                let nf = *n as f64;
                let a = (wrap_unit(x[0]) * nf).round() as usize % n;
                let b = (wrap_unit(x[1]) * nf).round() as usize % n;
                margin[a * n + b]
            }
        }
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        self.margin(x) > 0.0
    }

    /// Membership in the complement-dilation by `eps` (the `eps`-erosion).
    pub fn contains_eroded(&self, x: [f64; 2], eps: f64) -> bool {
        self.margin(x) > eps
    }

    /// Resolution of the set description; zero for exact shapes.
    pub fn cell(&self) -> f64 {
        match self {
            Self::GridMask { n, .. } => 1.0 / *n as f64,
            _ => 0.0,
        }
    }
}

/// Distance from `x` to the closed geodesic of direction `(p, q)` through `offset`.
pub fn strip_distance(direction: [i64; 2], offset: [f64; 2], x: [f64; 2]) -> f64 {
    let (p, q) = (direction[0] as f64, direction[1] as f64);
    let u = (x[0] - offset[0]) * (-q) + (x[1] - offset[1]) * p;
    wrap_delta(u).abs() / p.hypot(q)
}

/// Signed distance from each node to the boundary between mask and complement.
fn signed_margin(n: usize, mask: &[bool]) -> Vec<f64> {
    let h = 1.0 / n as f64;
    let mut out = vec![0.0; n * n];
    let all = mask.iter().all(|&m| m);
    for a in 0..n {
        for b in 0..n {
            let inside = mask[a * n + b];
            if all {
                out[a * n + b] = f64::INFINITY;
                continue;
            }
            // nearest node of the opposite kind; rings grow until the best cannot improve
            let mut best = f64::INFINITY;
            for ring in 1..=n / 2 {
                if (ring as f64 - 1.0) * h > best {
                    break;
                }
                let r = ring as i64;
                for da in -r..=r {
                    for db in -r..=r {
                        if da.abs() != r && db.abs() != r {
                            continue;
                        }
                        let aa = (a as i64 + da).rem_euclid(n as i64) as usize;
                        let bb = (b as i64 + db).rem_euclid(n as i64) as usize;
                        if mask[aa * n + bb] != inside {
                            best = best.min(((da * da + db * db) as f64).sqrt() * h);
                        }
                    }
                }
            }
            // boundary sits halfway between nodes of opposite kind
            let d = best - h / 2.0;
            out[a * n + b] = if inside { d.max(h / 4.0) } else { -d.max(h / 4.0) };
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GccOptions {
    pub n_dirs: usize,
    /// Starts per side: `n_starts²` start points at `(i/n_starts, j/n_starts)`.
    pub n_starts: usize,
    pub l_max: f64,
    /// Erosion depth used for the hit test.
    pub eps: f64,
}

impl Default for GccOptions {
    fn default() -> Self {
        Self { n_dirs: 64, n_starts: 32, l_max: 20.0, eps: 1.0 / 64.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RayWitness {
    pub x: [f64; 2],
    pub e: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GccReport {
    pub holds: bool,
    /// Largest hitting length over all sampled rays (when `holds`).
    pub max_length: f64,
    pub witness: Option<RayWitness>,
    pub options: GccOptions,
}

fn direction(j: usize, n_dirs: usize) -> [f64; 2] {
    let a = 2.0 * PI * j as f64 / n_dirs as f64;
    [a.cos(), a.sin()]
}

/// First length `y ≤ l_max` at which the marched ray enters `inside`.
fn march(x: [f64; 2], e: [f64; 2], step: f64, l_max: f64, inside: impl Fn([f64; 2]) -> bool) -> Option<f64> {
    let steps = (l_max / step).ceil() as usize;
    (0..=steps).map(|s| s as f64 * step).find(|&y| inside([x[0] + y * e[0], x[1] + y * e[1]]))
}

pub fn check_gcc(omega: &ControlSet, opts: &GccOptions) -> Result<GccReport> {
    if opts.n_dirs < 64 || opts.n_starts < 32 {
        return Err(Error::InvalidInput("GCC census needs at least 64 directions and 32² starts".into()));
    }
    if !(opts.eps > 0.0) || !(opts.l_max > 0.0) {
        return Err(Error::InvalidInput("erosion depth and ray cap must be positive".into()));
    }
    let step = opts.eps / 2.0;
    let mut max_length: f64 = 0.0;
    for j in 0..opts.n_dirs {
        let e = direction(j, opts.n_dirs);
        for a in 0..opts.n_starts {
            for b in 0..opts.n_starts {
                let x = [a as f64 / opts.n_starts as f64, b as f64 / opts.n_starts as f64];
                match march(x, e, step, opts.l_max, |p| omega.contains_eroded(p, opts.eps)) {
                    Some(y) => max_length = max_length.max(y),
                    None => {
                        return Ok(GccReport {
                            holds: false,
                            max_length: f64::INFINITY,
                            witness: Some(RayWitness { x, e }),
                            options: *opts,
                        })
                    }
                }
            }
        }
    }
    Ok(GccReport { holds: true, max_length, witness: None, options: *opts })
}

/// Coprime directions `(p, q)` along which some closed geodesic misses a ball of radius `radius`.
///
/// Lines of direction `(p, q)` are `1/√(p²+q²)` apart, so one of them
/// avoids the ball exactly when that spacing exceeds the diameter. Both
/// orientations of each line are listed.
pub fn enumerate_bad_directions(radius: f64) -> Vec<[i64; 2]> {
    if !(radius > 0.0) || radius >= 0.5 {
        return Vec::new();
    }
    let bound = 1.0 / (4.0 * radius * radius);
    let r = bound.sqrt().ceil() as i64;
    let mut out = Vec::new();
    for p in -r..=r {
        for q in -r..=r {
            if (p, q) != (0, 0) && gcd(p, q) == 1 && ((p * p + q * q) as f64) < bound {
                out.push([p, q]);
            }
        }
    }
    out.sort_by(|a, b| angle_of(*a).total_cmp(&angle_of(*b)));
    out
}

pub fn angle_of(d: [i64; 2]) -> f64 {
    (d[1] as f64).atan2(d[0] as f64).rem_euclid(2.0 * PI)
}

/// Largest distance from the ball centre to the nearest line of the geodesic family,
/// maximized over offsets: half the spacing.
pub fn widest_miss(direction: [i64; 2]) -> f64 {
    0.5 / (direction[0] as f64).hypot(direction[1] as f64)
}

/// `γ = D b̃ + (d/2) b̲`.
pub fn bending_gamma(big_d: f64, d: f64, b_lower: f64, b_tilde: f64) -> f64 {
    big_d * b_tilde + 0.5 * d * b_lower
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MagneticCertificate {
    pub valid: bool,
    /// `+1` when `b` itself was certified, `−1` for `−b`.
    pub sign: f64,
    pub threshold: f64,
    /// Fraction of nodes in the positive set `K`.
    pub k_fraction: f64,
    pub b_lower: f64,
    pub b_tilde: f64,
    /// Maximum of the certified field.
    pub b_upper: f64,
    pub d: f64,
    pub big_d: f64,
    pub gamma: f64,
    pub gcc: Option<GccReport>,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BendingOptions {
    /// Threshold defining `K = {b ≥ threshold}`; `None` scans fractions of `max b`.
    pub threshold: Option<f64>,
    /// Upper cap on `d`; `4d` stays below the unit period.
    pub d_cap: f64,
    pub gcc: GccOptions,
}

impl Default for BendingOptions {
    fn default() -> Self {
        Self { threshold: None, d_cap: 0.25, gcc: GccOptions::default() }
    }
}

/// Nodes within distance `r` of the mask.
fn dilate(n: usize, margin: &[f64], r: f64) -> Vec<bool> {
    margin.iter().map(|&m| m >= 0.5 / n as f64 - r - 1e-12).collect()
}

pub fn certify_bending(b: &ScalarField, opts: &BendingOptions) -> Result<MagneticCertificate> {
    let plus = certify_sign(b, 1.0, opts)?;
    if plus.valid {
        return Ok(plus);
    }
    let minus = certify_sign(b, -1.0, opts)?;
    if minus.valid {
        return Ok(minus);
    }
    Ok(MagneticCertificate {
        diagnostic: Some(format!(
            "neither sign certifies: +b: {}; -b: {}",
            plus.diagnostic.unwrap_or_default(),
            minus.diagnostic.unwrap_or_default()
        )),
        ..plus
    })
}

fn certify_sign(b: &ScalarField, sign: f64, opts: &BendingOptions) -> Result<MagneticCertificate> {
    let grid = b.grid();
    let n = grid.n();
    let vals: Vec<f64> = b.values().iter().map(|v| sign * v).collect();
    let b_max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let b_min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let thresholds: Vec<f64> = match opts.threshold {
        Some(t) => vec![t],
        None => [0.5, 0.25, 0.1].iter().map(|f| f * b_max).collect(),
    };
    let mut last: Option<MagneticCertificate> = None;
    for threshold in thresholds {
        let empty = MagneticCertificate {
            valid: false,
            sign,
            threshold,
            k_fraction: 0.0,
            b_lower: 0.0,
            b_tilde: b_min,
            b_upper: b_max,
            d: 0.0,
            big_d: f64::INFINITY,
            gamma: f64::NEG_INFINITY,
            gcc: None,
            diagnostic: None,
        };
        if !(threshold > 0.0) {
            last = Some(MagneticCertificate { diagnostic: Some("field has no positive part".into()), ..empty });
            continue;
        }
        let mask: Vec<bool> = vals.iter().map(|&v| v >= threshold).collect();
        let k_fraction = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        if k_fraction == 0.0 {
            last = Some(MagneticCertificate { diagnostic: Some(format!("K empty at threshold {threshold}")), ..empty });
            continue;
        }
        let k = ControlSet::from_mask(n, mask)?;
        let gcc_opts = GccOptions { eps: opts.gcc.eps.max(k.cell()), ..opts.gcc };
        let gcc = check_gcc(&k, &gcc_opts)?;
        if !gcc.holds {
            last = Some(MagneticCertificate {
                k_fraction,
                diagnostic: Some(format!("K = {{b ≥ {threshold}}} fails the geometric condition: {:?}", gcc.witness)),
                gcc: Some(gcc),
                ..empty
            });
            continue;
        }
        let margin = match &k {
            ControlSet::GridMask { margin, .. } => margin.clone(),
            _ => unreachable!(),
        };
        let min_on = |mask: &[bool]| vals.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let b_k = min_on(&dilate(n, &margin, 0.0));
        // largest d with b ≥ b_K/2 on K_{2d}
        let ok = |d: f64| min_on(&dilate(n, &margin, 2.0 * d)) >= 0.5 * b_k;
        let d = if ok(opts.d_cap) {
            opts.d_cap
        } else {
            let (mut lo, mut hi) = (0.0, opts.d_cap);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if ok(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        if d <= 0.0 {
            last = Some(MagneticCertificate { k_fraction, diagnostic: Some("no positive thickening of K".into()), gcc: Some(gcc), ..empty });
            continue;
        }
        let b_lower = min_on(&dilate(n, &margin, 2.0 * d));
        let kd = dilate(n, &margin, d);
        let big_d = dwell_length(n, &kd, d, &gcc_opts);
        let gamma = bending_gamma(big_d, d, b_lower, b_min);
        let valid = big_d.is_finite() && gamma > 0.0 && b_lower > 0.0;
        let cert = MagneticCertificate {
            valid,
            sign,
            threshold,
            k_fraction,
            b_lower,
            b_tilde: b_min,
            b_upper: b_max,
            d,
            big_d,
            gamma,
            gcc: Some(gcc),
            diagnostic: (!valid).then(|| format!("γ = {gamma:.3e} with D = {big_d:.3e}, d = {d:.3e}")),
        };
        if valid {
            return Ok(cert);
        }
        last = Some(cert);
    }
    Ok(last.expect("at least one threshold"))
}

/// Smallest `D` such that every sampled ray stays in `K_d` for a length
/// `d/2` starting at some `t ≤ D`.
fn dwell_length(n: usize, kd: &[bool], d: f64, opts: &GccOptions) -> f64 {
    let nf = n as f64;
    let inside = |p: [f64; 2]| {
        let a = (wrap_unit(p[0]) * nf).round() as usize % n;
        let b = (wrap_unit(p[1]) * nf).round() as usize % n;
        kd[a * n + b]
    };
    if kd.iter().all(|&m| m) {
        return 0.0;
    }
    let step = 0.5 / nf;
    let need = (0.5 * d / step).ceil() as usize;
    let steps = (opts.l_max / step).ceil() as usize;
    let mut worst: f64 = 0.0;
    for j in 0..opts.n_dirs {
        let e = direction(j, opts.n_dirs);
        for a in 0..opts.n_starts {
            for b in 0..opts.n_starts {
                let x = [a as f64 / opts.n_starts as f64, b as f64 / opts.n_starts as f64];
                let mut run = 0;
                let mut found = None;
                for s in 0..=steps {
                    let y = s as f64 * step;
                    if inside([x[0] + y * e[0], x[1] + y * e[1]]) {
                        run += 1;
                        if run > need {
                            found = Some(y - need as f64 * step);
                            break;
                        }
                    } else {
                        run = 0;
                    }
                }
                match found {
                    Some(t) => worst = worst.max(t),
                    None => return f64::INFINITY,
                }
            }
        }
    }
    worst
}

/// Columns needed by the rotation `y ↦ y + α (mod 1)` before every gap between
/// visited points is shorter than `window`; `None` past `cap`.
fn rotation_cover(alpha: f64, window: f64, cap: usize) -> Option<usize> {
    let alpha = alpha.rem_euclid(1.0);
    let mut pts: BTreeSet<u64> = BTreeSet::new();
    let mut gaps: BTreeMap<u64, usize> = BTreeMap::new();
    let key = |x: f64| x.to_bits();
    pts.insert(key(0.0));
    gaps.insert(key(1.0), 1);
    let mut y: f64 = 0.0;
    for j in 1..=cap {
        let top = f64::from_bits(*gaps.keys().next_back().expect("one gap"));
        if top < window {
            return Some(j - 1);
        }
        y = (y + alpha).rem_euclid(1.0);
        if pts.contains(&key(y)) {
            return None;
        }
        let prev = pts.range(..key(y)).next_back().map(|&b| f64::from_bits(b));
        let next = pts.range(key(y)..).next().map(|&b| f64::from_bits(b));
        let (lo, hi) = match (prev, next) {
            (Some(p), Some(q)) => (p, q),
            (Some(p), None) => (p, 1.0 + f64::from_bits(*pts.iter().next().unwrap())),
            (None, Some(q)) => (f64::from_bits(*pts.iter().next_back().unwrap()) - 1.0, q),
            (None, None) => unreachable!(),
        };
        let old = hi - lo;
        let entry = gaps.get_mut(&key(old)).map(|c| {
            *c -= 1;
            *c
        });
        if entry == Some(0) {
            gaps.remove(&key(old));
        }
        for g in [y - lo, hi - y] {
            *gaps.entry(key(g)).or_insert(0) += 1;
        }
        pts.insert(key(y));
    }
    None
}

/// Upper bound on the length a free ray of direction `e` travels before its
/// line passes within `radius` of a translate of a fixed point, uniform over starts.
pub fn max_hit_length(e: [f64; 2], radius: f64, cap: usize) -> Option<f64> {
    let (major, minor) = if e[0].abs() >= e[1].abs() { (e[0], e[1]) } else { (e[1], e[0]) };
    let cosine = major.abs() / norm(e);
    let alpha = minor / major;
    // lattice point at column j is within radius of the line iff its offset is below radius/cos
    let window = 2.0 * radius / cosine;
    let cols = rotation_cover(alpha, window, cap)?;
    Some((cols as f64 + 2.0) / cosine)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BendingParams {
    pub m: f64,
    pub c0: f64,
    pub m_bar: f64,
    pub tau: f64,
    pub beta: f64,
    pub n_bad: usize,
    /// Smallest angular gap between bad directions.
    pub gap: f64,
    pub l: f64,
    pub t_m: f64,
    pub t: f64,
    pub checks: BendingChecks,
}

/// Each inequality the parameters must satisfy, evaluated by substitution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BendingChecks {
    pub beta_vs_cone_gap: bool,
    pub beta_vs_rotation: bool,
    pub free_flight_before_wait: bool,
    pub straightness_near_probe: bool,
    pub straightness_in_thickening: bool,
    pub enough_bad_directions: bool,
}

impl BendingChecks {
    pub fn all(&self) -> bool {
        self.beta_vs_cone_gap
            && self.beta_vs_rotation
            && self.free_flight_before_wait
            && self.straightness_near_probe
            && self.straightness_in_thickening
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeriveOptions {
    /// Uniform directions sampled for the free-flight length.
    pub n_dirs: usize,
    /// Cap on the number of lattice columns examined per direction.
    pub column_cap: usize,
    /// Safety factor on the speed floor.
    pub margin: f64,
    pub beta_floor: f64,
}

impl Default for DeriveOptions {
    fn default() -> Self {
        Self { n_dirs: 4096, column_cap: 5_000_000, margin: 1.05, beta_floor: 1e-9 }
    }
}

/// Intermediate quantities that do not depend on the speed cap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BendingSkeleton {
    pub bad: Vec<[i64; 2]>,
    pub gap: f64,
    pub beta: f64,
    pub tau_min: f64,
    pub l: f64,
    /// Speed floor `m` (also used as `c₀`).
    pub m: f64,
}

pub fn bending_skeleton(cert: &MagneticCertificate, ball: Ball, opts: &DeriveOptions) -> Result<BendingSkeleton> {
    if !cert.valid {
        return Err(Error::Precondition("magnetic certificate is not valid".into()));
    }
    let probe = ball.radius / 8.0;
    let bad = enumerate_bad_directions(probe);
    let angles: Vec<f64> = bad.iter().map(|d| angle_of(*d)).collect();
    let gap = if angles.len() >= 2 {
        angles
            .windows(2)
            .map(|w| w[1] - w[0])
            .chain(std::iter::once(angles[0] + 2.0 * PI - angles[angles.len() - 1]))
            .fold(f64::INFINITY, f64::min)
    } else {
        2.0 * PI
    };
    let thick = cert.big_d + 0.5 * cert.d;
    let kappa = cert.gamma / (14.0 * cert.b_lower * thick);
    let beta = 0.9 * gap * (1.0 / 9.0f64).min(kappa / (1.0 + kappa));
    if !(beta >= opts.beta_floor) {
        return Err(Error::Infeasible(format!(
            "angular margin β = {beta:.3e} below floor {:.1e} (γ = {:.3e})",
            opts.beta_floor, cert.gamma
        )));
    }
    let tau_min = (gap - beta) / (7.0 * cert.b_lower);
    // free-flight length outside the cones: uniform samples plus both edges of every cone
    let in_cone = |a: f64| {
        angles.iter().any(|&c| {
            let d = (a - c).rem_euclid(2.0 * PI);
            d.min(2.0 * PI - d) < beta / 2.0
        })
    };
    let mut probes: Vec<f64> = (0..opts.n_dirs).map(|j| 2.0 * PI * (j as f64 + 0.5) / opts.n_dirs as f64).filter(|&a| !in_cone(a)).collect();
    for &c in &angles {
        probes.push(c + beta / 2.0);
        probes.push(c - beta / 2.0);
    }
    let mut l: f64 = 0.0;
    for a in probes {
        match max_hit_length([a.cos(), a.sin()], probe, opts.column_cap) {
            Some(len) => l = l.max(len),
            None => {
                return Err(Error::Infeasible(format!(
                    "direction {a:.6} needs more than {} columns to meet the probe ball",
                    opts.column_cap
                )))
            }
        }
    }
    let mut q = (tau_min / l).min(ball.radius / (4.0 * cert.b_upper * l * l));
    if cert.big_d > 0.0 {
        q = q.min(cert.d / (cert.b_upper * thick * thick));
    }
    let m = opts.margin * 2f64.sqrt() / q;
    Ok(BendingSkeleton { bad, gap, beta, tau_min, l, m })
}

/// Speed floor below which the bending construction gives no guarantee.
pub fn required_speed(cert: &MagneticCertificate, ball: Ball, opts: &DeriveOptions) -> Result<f64> {
    Ok(bending_skeleton(cert, ball, opts)?.m)
}

pub fn derive_bending_params(cert: &MagneticCertificate, ball: Ball, m_bar: f64, opts: &DeriveOptions) -> Result<BendingParams> {
    let sk = bending_skeleton(cert, ball, opts)?;
    params_from_skeleton(cert, ball, &sk, m_bar)
}

pub fn params_from_skeleton(cert: &MagneticCertificate, ball: Ball, sk: &BendingSkeleton, m_bar: f64) -> Result<BendingParams> {
    let m = sk.m;
    if m_bar < m {
        return Err(Error::Infeasible(format!("speed cap {m_bar:.3e} is below the required floor m = {m:.3e}")));
    }
    let c0 = m;
    let s = (1.0 + m_bar * m_bar / (c0 * c0)).sqrt();
    let tau = s * (sk.gap - sk.beta) / (7.0 * cert.b_lower);
    let t_m = sk.l * (1.0 + m * m / (c0 * c0)).sqrt() / m;
    let t = 4.0 * (t_m + tau);
    let root = (1.0 / (c0 * c0) + 1.0 / (m * m)).sqrt();
    let thick = cert.big_d + 0.5 * cert.d;
    let checks = BendingChecks {
        beta_vs_cone_gap: sk.beta < (sk.gap - sk.beta) / 8.0,
        beta_vs_rotation: sk.beta < tau * cert.gamma / (2.0 * s * thick),
        free_flight_before_wait: sk.l * root < tau && sk.l * root < sk.tau_min,
        straightness_near_probe: cert.b_upper * sk.l * sk.l / 2.0 * root < ball.radius / 8.0,
        straightness_in_thickening: cert.big_d == 0.0 || cert.b_upper * thick * thick / 2.0 * root < cert.d / 2.0,
        enough_bad_directions: cert.big_d == 0.0 || sk.bad.len() >= 3,
    };
    Ok(BendingParams { m, c0, m_bar, tau, beta: sk.beta, n_bad: sk.bad.len(), gap: sk.gap, l: sk.l, t_m, t, checks })
}

/// Entry parameter `s ∈ [0, 1]` at which the segment `p → q` first comes
/// within `r` of a translate `center + Z²`.
pub fn segment_lattice_entry(p: [f64; 2], q: [f64; 2], center: [f64; 2], r: f64) -> Option<f64> {
    let d = [q[0] - p[0], q[1] - p[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let (ax, ox) = if d[0].abs() >= d[1].abs() { (0, 1) } else { (1, 0) };
    let entry = |c: [f64; 2]| -> Option<f64> {
        let w = [p[0] - c[0], p[1] - c[1]];
        let cc = w[0] * w[0] + w[1] * w[1] - r * r;
        if cc < 0.0 {
            return Some(0.0);
        }
        if len2 == 0.0 {
            return None;
        }
        let bb = w[0] * d[0] + w[1] * d[1];
        let disc = bb * bb - len2 * cc;
        if disc < 0.0 {
            return None;
        }
        let s = (-bb - disc.sqrt()) / len2;
        (0.0..=1.0).contains(&s).then_some(s)
    };
    let lo = p[ax].min(q[ax]) - r;
    let hi = p[ax].max(q[ax]) + r;
    let k_lo = (lo - center[ax]).ceil() as i64;
    let k_hi = (hi - center[ax]).floor() as i64;
    let forward = d[ax] >= 0.0;
    let mut best: Option<f64> = None;
    let count = (k_hi - k_lo + 1).max(0);
    for i in 0..count {
        let k = if forward { k_lo + i } else { k_hi - i };
        let ca = center[ax] + k as f64;
        if let Some(b) = best {
            // columns beyond the best entry by more than 2r cannot do better
            let reach = p[ax] + b * d[ax];
            if (forward && ca - r > reach + r) || (!forward && ca + r < reach - r) {
                break;
            }
        }
        let y = if d[ax] == 0.0 { p[ox] } else { p[ox] + (ca - p[ax]) * d[ox] / d[ax] };
        let ko = (y - center[ox]).round() as i64;
        for dk in -1..=1 {
            let co = center[ox] + (ko + dk) as f64;
            let mut c = [0.0; 2];
            c[ax] = ca;
            c[ox] = co;
            if let Some(s) = entry(c) {
                best = Some(best.map_or(s, |b: f64| b.min(s)));
            }
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensusGrid {
    pub positions: usize,
    pub directions: usize,
    pub speeds: usize,
}

impl Default for CensusGrid {
    fn default() -> Self {
        Self { positions: 16, directions: 12, speeds: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CensusSample {
    pub x: [f64; 2],
    pub v: [f64; 2],
    pub hit_time: Option<f64>,
    pub band_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BendingCensus {
    pub total: usize,
    pub hits: usize,
    pub band_ok: usize,
    pub hit_fraction: f64,
    pub band_fraction: f64,
    /// Sagitta tolerance subtracted from the target radius.
    pub chord_tol: f64,
    #[serde(skip)]
    pub samples: Vec<CensusSample>,
}

impl BendingCensus {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "x1,x2,v1,v2,hit_time,band_ok")?;
        for s in &self.samples {
            let hit = s.hit_time.map_or(String::from("nan"), |t| t.to_string());
            writeln!(w, "{},{},{},{},{hit},{}", s.x[0], s.x[1], s.v[0], s.v[1], u8::from(s.band_ok))?;
        }
        Ok(())
    }
}

/// Census of the bending lemma: from each sampled `(x, v)` with
/// `m ≤ |v| ≤ M̄`, does the characteristic visit `B(x₀, r₀/2)` during
/// `(T/4, 3T/4)` while keeping `|v|/2 ≤ |V| ≤ 2|v|`?
///
/// Steps are chosen per particle so that the sagitta of each chord against
/// the worst-case gyration radius `|v|/max|b|` stays below `chord_tol`; hits
/// are then tested on chords with the radius reduced by `chord_tol`.
pub fn verify_bending_lemma(
    params: &BendingParams,
    ball: Ball,
    force: &ForceSpec,
    b_max: f64,
    grid: &CensusGrid,
) -> Result<BendingCensus> {
    let target = ball.radius / 2.0;
    let chord_tol = target / 50.0;
    let r_hit = target - chord_tol;
    let mut samples = Vec::with_capacity(grid.positions * grid.positions * grid.directions * grid.speeds);
    let t_end = params.t;
    for a in 0..grid.positions {
        for b in 0..grid.positions {
            let x = [(a as f64 + 0.5) / grid.positions as f64, (b as f64 + 0.5) / grid.positions as f64];
            for j in 0..grid.directions {
                let e = direction(j, grid.directions);
                for k in 0..grid.speeds {
                    let frac = if grid.speeds > 1 { k as f64 / (grid.speeds - 1) as f64 } else { 0.0 };
                    let speed = params.m * (params.m_bar / params.m).powf(frac);
                    let v = [speed * e[0], speed * e[1]];
                    samples.push(census_one(PhaseState::new(x, v), force, t_end, ball.center, r_hit, chord_tol, b_max + force.extra_bound / speed));
                }
            }
        }
    }
    let total = samples.len();
    let hits = samples.iter().filter(|s| s.hit_time.is_some()).count();
    let band_ok = samples.iter().filter(|s| s.band_ok).count();
    Ok(BendingCensus {
        total,
        hits,
        band_ok,
        hit_fraction: hits as f64 / total.max(1) as f64,
        band_fraction: band_ok as f64 / total.max(1) as f64,
        chord_tol,
        samples,
    })
}

fn census_one(start: PhaseState, force: &ForceSpec, t_end: f64, center: [f64; 2], r_hit: f64, tol: f64, curvature: f64) -> CensusSample {
    let speed = start.speed();
    let vhat = speed / force.c.lorentz(start.v);
    // chord with sagitta tol on a circle of radius R is √(8 R tol)
    let radius = if curvature > 0.0 { speed / curvature } else { f64::INFINITY };
    let chord = (8.0 * radius * tol).sqrt().min(1e6 * t_end * vhat.max(1e-300));
    let mut steps = ((t_end * vhat / chord).ceil() as usize).max(64);
    steps += (4 - steps % 4) % 4;
    let h = t_end / steps as f64;
    let (lo, hi) = (steps / 4, 3 * steps / 4);
    let mut s = start;
    let mut hit_time = None;
    let mut band_ok = true;
    for q in 0..steps {
        let t = q as f64 * h;
        let next = rk4_step(s, t, h, force);
        let sp = next.speed();
        if !(sp >= speed / 2.0 && sp <= 2.0 * speed) {
            band_ok = false;
        }
        if hit_time.is_none() && (lo..hi).contains(&q) {
            if let Some(f) = segment_lattice_entry(s.x, next.x, center, r_hit) {
                hit_time = Some(t + f * h);
            }
        }
        s = next;
    }
    CensusSample { x: start.x, v: start.v, hit_time, band_ok }
}

/// Light speed used by a census at `factor · c₀`.
pub fn census_light_speed(params: &BendingParams, factor: f64) -> LightSpeed {
    LightSpeed::Finite(params.c0 * factor)
}

/// Convenience: pure magnetic provider from a closed-form `b(x)`.
pub struct MagneticOnly<F>(pub F);

impl<F: Fn([f64; 2]) -> f64> FieldProvider for MagneticOnly<F> {
    fn fields(&self, _t: f64, x: [f64; 2]) -> ([f64; 2], f64) {
        ([0.0, 0.0], (self.0)(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_gcc() -> GccOptions {
        GccOptions { n_dirs: 64, n_starts: 32, l_max: 6.0, eps: 1.0 / 64.0 }
    }

    #[test]
    fn gcc_whole_torus() {
        let r = check_gcc(&ControlSet::Whole, &small_gcc()).unwrap();
        assert!(r.holds && r.max_length == 0.0);
        let g = GridSpec::new(16, 4).unwrap();
        let all = ControlSet::from_mask_fn(g, |_| true).unwrap();
        let r = check_gcc(&all, &small_gcc()).unwrap();
        assert!(r.holds && r.max_length == 0.0);
    }

    #[test]
    fn gcc_strip_parallel_witness() {
        let strip = ControlSet::strip([1, 0], [0.0, 0.5], 0.1).unwrap();
        let r = check_gcc(&strip, &small_gcc()).unwrap();
        assert!(!r.holds);
        let w = r.witness.unwrap();
        assert!((w.e[0].abs() - 1.0).abs() < 1e-12 && w.e[1].abs() < 1e-12);
        assert!(!strip.contains(w.x));
        // oblique strip of direction (1,1) meets every non-parallel ray
        let diag = ControlSet::strip([1, 1], [0.5, 0.5], 0.15).unwrap();
        let r = check_gcc(&diag, &small_gcc()).unwrap();
        assert!(!r.holds);
    }

    #[test]
    fn gcc_thin_mask_fails() {
        let g = GridSpec::new(32, 4).unwrap();
        let thin = ControlSet::from_mask_fn(g, |x| x[0] < 1e-9 && x[1] < 1e-9).unwrap();
        assert!(!check_gcc(&thin, &small_gcc()).unwrap().holds);
    }

    #[test]
    fn gcc_ball_census() {
        let ball = ControlSet::balls(vec![Ball::new([0.5, 0.5], 0.3)]).unwrap();
        let r = check_gcc(&ball, &small_gcc()).unwrap();
        // lines of direction (1,0) are spaced 1 > 0.6 apart, so some rays miss
        assert!(!r.holds);
        // a cross of two strips' worth of balls meets every ray
        let mut balls = Vec::new();
        for i in 0..6 {
            let s = i as f64 / 6.0;
            balls.push(Ball::new([s, 0.5], 0.12));
            balls.push(Ball::new([0.5, s], 0.12));
        }
        let cross = ControlSet::balls(balls).unwrap();
        let r = check_gcc(&cross, &small_gcc()).unwrap();
        assert!(r.holds, "{:?}", r.witness);
        assert!(r.max_length < 2.0);
    }

    #[test]
    fn gcc_rejects_coarse_census() {
        let opts = GccOptions { n_dirs: 8, ..small_gcc() };
        assert!(check_gcc(&ControlSet::Whole, &opts).is_err());
    }

    #[test]
    fn strip_membership_and_coprimality() {
        assert!(ControlSet::strip([2, 2], [0.0, 0.0], 0.1).is_err());
        let s = ControlSet::strip([1, 2], [0.1, 0.1], 0.05).unwrap();
        assert!(s.contains([0.1, 0.1]) && s.contains([0.6, 1.1]));
        assert!(!s.contains([0.3, 0.1]));
    }

    fn brute_bad(radius: f64) -> Vec<[i64; 2]> {
        let mut out = Vec::new();
        for p in -12i64..=12 {
            for q in -12i64..=12 {
                if (p, q) == (0, 0) || gcd(p, q) != 1 {
                    continue;
                }
                // sweep offsets of the line family through the ball centre
                let misses = (0..4000).any(|i| {
                    let offset = [0.5 + i as f64 / 4000.0 * (-(q as f64)), 0.5 + i as f64 / 4000.0 * p as f64];
                    strip_distance([p, q], offset, [0.5, 0.5]) > radius
                });
                if misses {
                    out.push([p, q]);
                }
            }
        }
        out.sort_by(|a, b| angle_of(*a).total_cmp(&angle_of(*b)));
        out
    }

    #[test]
    fn bad_directions_radius_03() {
        let bad = enumerate_bad_directions(0.3);
        assert_eq!(bad.len(), 8);
        for d in &bad {
            assert!(d[0].abs() <= 1 && d[1].abs() <= 1);
        }
        assert_eq!(bad, brute_bad(0.3));
        assert!(enumerate_bad_directions(0.5).is_empty());
        assert!(enumerate_bad_directions(0.7).is_empty());
    }

    #[test]
    fn bad_directions_match_offset_sweep() {
        for r in [0.05, 0.12, 0.2] {
            let bad = enumerate_bad_directions(r);
            assert_eq!(bad, brute_bad(r), "r = {r}");
            for d in &bad {
                assert!(bad.contains(&[-d[0], -d[1]]));
                assert!(bad.contains(&[-d[1], d[0]]));
                assert!(widest_miss(*d) > r);
            }
        }
    }

    #[test]
    fn gamma_arithmetic() {
        assert!((bending_gamma(1.0, 0.5, 2.0, -0.3) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn constant_field_certifies() {
        let g = GridSpec::new(32, 4).unwrap();
        let opts = BendingOptions { gcc: small_gcc(), ..Default::default() };
        let cert = certify_bending(&ScalarField::constant(g, 1.0), &opts).unwrap();
        assert!(cert.valid);
        assert_eq!(cert.big_d, 0.0);
        assert_eq!(cert.b_lower, 1.0);
        assert_eq!(cert.b_tilde, 1.0);
        assert!((cert.gamma - cert.d / 2.0).abs() < 1e-15);
        let neg = certify_bending(&ScalarField::constant(g, -1.0), &opts).unwrap();
        assert!(neg.valid && neg.sign == -1.0);
    }

    #[test]
    fn band_field_fails_both_signs() {
        let g = GridSpec::new(32, 4).unwrap();
        let opts = BendingOptions { gcc: small_gcc(), ..Default::default() };
        let b = ScalarField::from_fn(g, |x| (2.0 * PI * x[0]).sin());
        let plus = certify_bending(&b, &opts).unwrap();
        let minus = certify_bending(&b.scaled(-1.0), &opts).unwrap();
        assert_eq!(plus.valid, minus.valid);
        assert!(!plus.valid && plus.diagnostic.is_some());
    }

    #[test]
    fn varying_positive_field_has_thickness() {
        let g = GridSpec::new(32, 4).unwrap();
        let opts = BendingOptions { gcc: small_gcc(), ..Default::default() };
        let b = ScalarField::from_fn(g, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).cos());
        let cert = certify_bending(&b, &opts).unwrap();
        assert!(cert.valid);
        assert!(cert.d > 0.0 && cert.b_lower > 0.0 && cert.gamma > 0.0);
    }

    #[test]
    fn rotation_cover_matches_brute_force() {
        for &(alpha, w) in &[(0.3819660112501051, 0.05), (0.01, 0.1), (0.2137, 0.05)] {
            let j = rotation_cover(alpha, w, 100_000);
            // brute: smallest J with all gaps of {0, α, …, Jα} below w
            let brute = (0..5_000usize).find(|&jj| {
                let mut pts: Vec<f64> = (0..=jj).map(|i| (i as f64 * alpha).rem_euclid(1.0)).collect();
                pts.sort_by(f64::total_cmp);
                let mut gap = 1.0 - pts[pts.len() - 1] + pts[0];
                for p in pts.windows(2) {
                    gap = gap.max(p[1] - p[0]);
                }
                gap < w
            });
            assert_eq!(j, brute, "alpha {alpha}");
        }
        // rational rotation never covers a fine window
        assert_eq!(rotation_cover(0.5, 0.1, 1000), None);
    }

    #[test]
    fn hit_length_bounds_every_start() {
        let e = [0.8f64.cos(), 0.8f64.sin()];
        let r = 0.05;
        let l = max_hit_length(e, r, 1_000_000).unwrap();
        for a in 0..20 {
            for b in 0..20 {
                let x = [a as f64 / 20.0, b as f64 / 20.0];
                let p = x;
                let q = [x[0] + l * e[0], x[1] + l * e[1]];
                assert!(segment_lattice_entry(p, q, [0.5, 0.5], r).is_some());
            }
        }
    }

    #[test]
    fn segment_entry_cases() {
        let c = [0.5, 0.5];
        assert_eq!(segment_lattice_entry([0.5, 0.5], [0.6, 0.5], c, 0.1), Some(0.0));
        let s = segment_lattice_entry([0.0, 0.5], [1.0, 0.5], c, 0.1).unwrap();
        assert!((s - 0.4).abs() < 1e-12);
        // long segment reaching a far translate
        let s = segment_lattice_entry([0.0, 0.0], [10.0, 0.0], c, 0.1);
        assert!(s.is_none());
        let s = segment_lattice_entry([0.0, 5.5], [10.0, 5.5], c, 0.1).unwrap();
        assert!((s - 0.04).abs() < 1e-12);
        let s = segment_lattice_entry([10.0, 5.5], [0.0, 5.5], c, 0.1).unwrap();
        assert!((s - 0.04).abs() < 1e-12);
    }

    fn constant_cert() -> MagneticCertificate {
        let g = GridSpec::new(16, 4).unwrap();
        let opts = BendingOptions { gcc: small_gcc(), ..Default::default() };
        certify_bending(&ScalarField::constant(g, 1.0), &opts).unwrap()
    }

    #[test]
    fn derived_params_satisfy_constraints() {
        let cert = constant_cert();
        let ball = Ball::new([0.5, 0.5], 0.3);
        let opts = DeriveOptions { n_dirs: 512, ..Default::default() };
        let m = required_speed(&cert, ball, &opts).unwrap();
        let p = derive_bending_params(&cert, ball, 2.0 * m, &opts).unwrap();
        assert!(p.checks.all(), "{:?}", p.checks);
        assert!(p.t > 0.0 && p.tau > 0.0 && p.beta > 0.0 && p.n_bad > 0);
        assert!(matches!(derive_bending_params(&cert, ball, 0.5 * m, &opts), Err(Error::Infeasible(_))));
        let p2 = derive_bending_params(&cert, ball, 4.0 * m, &opts).unwrap();
        assert!(p2.t >= p.t);
    }

    #[test]
    fn vanishing_gamma_is_infeasible() {
        let mut cert = constant_cert();
        cert.gamma = 1e-14;
        let r = bending_skeleton(&cert, Ball::new([0.5, 0.5], 0.3), &DeriveOptions::default());
        assert!(matches!(r, Err(Error::Infeasible(_))));
        let mut shrinking = Vec::new();
        for g in [0.5, 0.2, 0.1] {
            let mut c = constant_cert();
            c.gamma = g;
            c.big_d = 0.1;
            shrinking.push(bending_skeleton(&c, Ball::new([0.5, 0.5], 0.3), &DeriveOptions { n_dirs: 64, ..Default::default() }).unwrap().beta);
        }
        assert!(shrinking[0] > shrinking[1] && shrinking[1] > shrinking[2]);
    }

    #[test]
    fn census_small_ball_bends_or_misses() {
        let cert = constant_cert();
        let ball = Ball::new([0.5, 0.5], 0.3);
        let opts = DeriveOptions { n_dirs: 512, ..Default::default() };
        let m = required_speed(&cert, ball, &opts).unwrap();
        let p = derive_bending_params(&cert, ball, 2.0 * m, &opts).unwrap();
        let grid = CensusGrid { positions: 4, directions: 8, speeds: 2 };
        let b1 = MagneticOnly(|_x: [f64; 2]| 1.0);
        let force = ForceSpec::new(&b1, census_light_speed(&p, 10.0));
        let census = verify_bending_lemma(&p, ball, &force, 1.0, &grid).unwrap();
        assert_eq!(census.hits, census.total);
        assert_eq!(census.band_ok, census.total);
        let b0 = MagneticOnly(|_x: [f64; 2]| 0.0);
        let free = ForceSpec::new(&b0, census_light_speed(&p, 10.0));
        let census = verify_bending_lemma(&p, ball, &free, 0.0, &grid).unwrap();
        assert!(census.hit_fraction < 1.0);
    }
}
